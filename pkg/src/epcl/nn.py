"""Parameter containers built on :mod:`epcl.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A tensor owned by a module. Frozen parameters have ``requires_grad=False``."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


class Module:
    """Attribute-walking parameter registry.

    Parameters are :class:`Tensor` attributes created with ``requires_grad``;
    child modules and lists of modules are traversed recursively. Names are
    dotted attribute paths, which is also how they appear in weight files.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing[:5]}")
        for name, p in own.items():
            if name not in arrays:
                continue
            src = np.asarray(arrays[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {p.shape}")
            p.data = src.astype(p.dtype, copy=True)

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(arr: np.ndarray, dtype) -> Parameter:
    return Parameter(arr, dtype=dtype)


class Linear(Module):
    """y = x W + b, W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None, dtype=np.float32):
        scale = std if std is not None else 1.0 / np.sqrt(n_in)
        if std is None:
            w = rng.uniform(-scale, scale, size=(n_in, n_out))
        else:
            w = rng.normal(0.0, scale, size=(n_in, n_out))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.weight = _param(np.ones(dim), dtype)
        self.bias = _param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (not after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator, dtype=np.float32,
                 final_activation: bool = False):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = T.relu(x)
        return x
