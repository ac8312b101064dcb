"""Central finite-difference checks for the differentiable ops.

``OP_CASES`` maps an op name to a builder ``rng -> (fn, inputs)``; ``fn``
takes float64 tensors and returns a tensor of any shape. The checked scalar
is ``sum(fn(*inputs) * R)`` with a fixed random ``R``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """``|a - b| / (|a| + |b|)``; the floor keeps identically-zero gradients
    (e.g. an attention key bias) from dividing round-off by round-off."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)


def check_gradients(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                    h: float = 1e-5) -> float:
    """Largest relative error between analytic and numeric input gradients."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    R = rng.normal(size=out.shape)
    T.backward(T.sum_(out * Tensor(R)))

    def scalar(arrays) -> float:
        with T.no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * R).sum())

    worst = 0.0
    base = [np.array(x, dtype=np.float64) for x in inputs]
    for i, x in enumerate(base):
        num = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            j = it.multi_index
            orig = x[j]
            x[j] = orig + h
            fp = scalar(base)
            x[j] = orig - h
            fm = scalar(base)
            x[j] = orig
            num[j] = (fp - fm) / (2 * h)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        worst = max(worst, relative_error(ana, num))
    return worst


def _away_from(x: np.ndarray, point: float = 0.0, gap: float = 0.05) -> np.ndarray:
    """Push values out of ``(point - gap, point + gap)`` to avoid kinks."""
    d = x - point
    return np.where(np.abs(d) < gap, point + np.sign(d + 1e-300) * gap + d, x)


def _distinct(rng, shape):
    """Values with well separated entries, so max/argmax is stable under h."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.02, size=n)).reshape(shape)


def _attention_inputs(rng, N=3, D=8):
    s = 1 / np.sqrt(D)
    return [rng.normal(size=(N, D))] + [rng.normal(size=sh) * s for sh in [(D, D), (D,)] * 4]


def _block_case(rng):
    from .backbone import Block, TransformerConfig

    cfg = TransformerConfig(layers=1, width=8, heads=2, mlp_ratio=2, dropout=0.0)
    block = Block(cfg, rng, dtype=np.float64)
    params = list(block.state_dict().items())
    for _, p in params:
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)

    def fn(x, *ps):
        saved = [p for _, p in params]
        for (name, _), new in zip(params, ps):
            _assign(block, name, new)
        try:
            return block(x)
        finally:
            for (name, _), old in zip(params, saved):
                _assign(block, name, old)

    return fn, [rng.normal(size=(2, 4, 8))] + [p.data.copy() for _, p in params]


def _assign(module, dotted: str, value):
    *path, last = dotted.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, last, value)


OP_CASES: dict[str, Callable] = {
    "add": lambda r: (T.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (T.sub, [r.normal(size=(3, 1)), r.normal(size=(3, 4))]),
    "mul": lambda r: (T.mul, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "div": lambda r: (T.div, [r.normal(size=(2, 3)), r.uniform(0.5, 2.0, size=(3,))]),
    "neg": lambda r: (T.neg, [r.normal(size=(5,))]),
    "power": lambda r: (lambda a: T.power(a, 3.0), [r.normal(size=(4,))]),
    "exp": lambda r: (T.exp, [r.normal(size=(2, 3))]),
    "log": lambda r: (T.log, [r.uniform(0.5, 3.0, size=(2, 3))]),
    "sqrt": lambda r: (T.sqrt, [r.uniform(0.5, 3.0, size=(4,))]),
    "tanh": lambda r: (T.tanh, [r.normal(size=(2, 3))]),
    "relu": lambda r: (T.relu, [_away_from(r.normal(size=(3, 4)))]),
    "gelu": lambda r: (T.gelu, [r.normal(size=(3, 4))]),
    "quick_gelu": lambda r: (T.quick_gelu, [r.normal(size=(3, 4))]),
    "sum": lambda r: (lambda a: T.sum_(a, axis=1, keepdims=True), [r.normal(size=(2, 3, 4))]),
    "mean": lambda r: (lambda a: T.mean(a, axis=(0, 2)), [r.normal(size=(2, 3, 4))]),
    "max": lambda r: (lambda a: T.max_(a, axis=-1), [_distinct(r, (3, 5))]),
    "max_pool": lambda r: (lambda a: T.max_pool(a, axis=1), [_distinct(r, (2, 4, 3))]),
    "reshape": lambda r: (lambda a: T.reshape(a, (4, 3)), [r.normal(size=(2, 6))]),
    "transpose": lambda r: (lambda a: T.transpose(a, (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
    "swapaxes": lambda r: (lambda a: T.swapaxes(a, 0, 1), [r.normal(size=(2, 3))]),
    "getitem": lambda r: (lambda a: a[1:, ::2], [r.normal(size=(3, 5))]),
    "getitem_fancy": lambda r: (lambda a: a[np.array([0, 2, 0])], [r.normal(size=(3, 2))]),
    "concat": lambda r: (lambda a, b: T.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "broadcast_to": lambda r: (lambda a: T.broadcast_to(a, (3, 2, 4)), [r.normal(size=(2, 1))]),
    "gather": lambda r: (lambda a: T.gather(a, np.array([[0, 2, 2], [1, 1, 0]])), [r.normal(size=(2, 3, 4))]),
    "matmul": lambda r: (T.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "matmul_batched": lambda r: (T.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
    "linear": lambda r: (T.linear, [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=(2,))]),
    "softmax": lambda r: (T.softmax, [r.normal(size=(3, 4))]),
    "log_softmax": lambda r: (T.log_softmax, [r.normal(size=(3, 4))]),
    "layer_norm": lambda r: (T.layer_norm, [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    "l2_normalize": lambda r: (T.l2_normalize, [r.normal(size=(3, 4))]),
    "cross_entropy": lambda r: (lambda a: T.cross_entropy(a, np.array([0, 2, 1, 2])), [r.normal(size=(4, 3))]),
    "attention": lambda r: (lambda x, *w: T.multi_head_self_attention(x, *w, heads=2), _attention_inputs(r)),
    "transformer_block": _block_case,
}
