"""AdamW over the trainable partition, train/eval loops, few-shot episodes."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BACKBONE_PREFIX
from .errors import ArgumentError, ContractError, NumericalError
from .heads import TextFeatureBank, contrastive_loss, segmentation_geometry, stack_geometry, total_classification_loss
from .models import CloudBatch, PointClassifier, PointSegmenter, prepare_clouds
from .nn import Parameter
from .weights import tensor_digest

log = logging.getLogger(__name__)

FEWSHOT_TEST_PER_CLASS = 20


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.04
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)

    Only parameters with ``requires_grad`` are touched; no moment buffers are
    ever allocated for frozen ones.
    """

    def __init__(self, params: list[Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.04):
        self.params = list(params)
        self.state = OptimizerState(lr, tuple(betas), eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        trainable = [p for p in self.params if p.requires_grad]
        for i, p in enumerate(trainable):
            if p.grad is None:
                raise ContractError(f"trainable tensor #{i} {p.shape} has no gradient")
        st.step += 1
        lr = st.lr if lr is None else lr
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p in trainable:
            key = id(p)
            g = p.grad
            m = st.m.get(key)
            if m is None:
                m = st.m[key] = np.zeros_like(p.data)
                st.v[key] = np.zeros_like(p.data)
            v = st.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + st.eps) + st.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)


def adamw_step(state: AdamW, lr: float | None = None) -> None:
    state.step(lr)


def cosine_lr(base: float, step: int, total: int, final: float = 0.0) -> float:
    if total <= 1:
        return base
    t = min(step, total) / total
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    clouds: list[np.ndarray]
    labels: np.ndarray  # per-cloud class id
    class_names: list[str]
    point_labels: list[np.ndarray] | None = None
    split: np.ndarray | None = None  # "train" / "test" per sample
    ids: list[str] | None = None

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.clouds[i] for i in idx], self.labels[idx], self.class_names,
            None if self.point_labels is None else [self.point_labels[i] for i in idx],
            None if self.split is None else self.split[idx],
            None if self.ids is None else [self.ids[i] for i in idx],
        )

    def indices(self, split: str) -> np.ndarray:
        if self.split is None:
            return np.arange(len(self))
        return np.flatnonzero(self.split == split)


# ------------------------------------------------------------------ metrics

def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if true.size == 0:
        raise ArgumentError("cannot evaluate an empty split")
    return float((pred == true).mean())


def segmentation_metrics(preds: list[np.ndarray], trues: list[np.ndarray], num_classes: int) -> dict[str, float]:
    """Point accuracy, mean per-class accuracy, and instance mIoU.

    mAcc averages, over classes present in the ground truth, the fraction of
    that class's points predicted correctly (pooled over all samples).
    Instance mIoU averages per sample the IoU of every class appearing in
    that sample's prediction or ground truth, then averages over samples.
    """
    if not trues or sum(len(t) for t in trues) == 0:
        raise ArgumentError("cannot evaluate an empty split")
    p_all = np.concatenate([np.asarray(p) for p in preds])
    t_all = np.concatenate([np.asarray(t) for t in trues])
    per_class = [float((p_all[t_all == c] == c).mean()) for c in range(num_classes) if (t_all == c).any()]
    inst = []
    for p, t in zip(preds, trues):
        p, t = np.asarray(p), np.asarray(t)
        ious = []
        for c in range(num_classes):
            union = ((p == c) | (t == c)).sum()
            if union:
                ious.append(((p == c) & (t == c)).sum() / union)
        inst.append(float(np.mean(ious)))
    return {
        "accuracy": float((p_all == t_all).mean()),
        "mAcc": float(np.mean(per_class)),
        "mIoU": float(np.mean(inst)),
    }


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "none"
    contrastive_weight: float = 0.0
    temperature: float = 0.07
    seed: int = 0
    eval_every: int = 1
    target: float | None = None  # stop once the held-out metric reaches this


@dataclass
class TrainReport:
    records: list[tuple[int, str, str, float]] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    backbone_hashes: list[dict[str, str]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.records.append((epoch, split, metric, float(value)))

    def metric(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.records if s == split and m == metric]

    def last(self, split: str, metric: str) -> float:
        vals = self.metric(split, metric)
        return vals[-1] if vals else float("nan")

    def to_csv(self) -> str:
        lines = ["epoch,split,metric,value"]
        lines += [f"{e},{s},{m},{v!r}" for e, s, m, v in self.records]
        return "\n".join(lines) + "\n"


def backbone_hashes(model) -> dict[str, str]:
    return {n: tensor_digest(p.data) for n, p in model.named_parameters() if n.startswith(BACKBONE_PREFIX)}


def optimized_parameters(model) -> list[Parameter]:
    """Trainable parameters on the point path (the image stem is never used)."""
    return [p for n, p in model.named_parameters()
            if p.requires_grad and not n.startswith(BACKBONE_PREFIX + "image_tokenizer.")]


class _Prepared:
    """Tokenizer geometry computed once per dataset."""

    def __init__(self, model, data: Dataset):
        self.data = data
        if isinstance(model, PointSegmenter):
            self.geo = [model.pipeline.geometry(c) for c in data.clouds]
            self.batch = None
        else:
            self.geo = None
            self.batch = prepare_clouds(data.clouds, model.cfg.patches, model.cfg.neighbors)

    def take(self, idx):
        if self.geo is not None:
            return stack_geometry([self.geo[i] for i in idx])
        return self.batch.take(idx)

    def targets(self, idx):
        if self.geo is not None:
            return np.concatenate([self.data.point_labels[i] for i in idx])
        return self.data.labels[idx]


def _loss(model, batch, targets, cfg: TrainConfig, bank, rng):
    if isinstance(model, PointSegmenter):
        logits = model(batch, rng)
        return T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), targets)
    logits, feat, _ = model(batch, rng)
    contrast = None
    if cfg.contrastive_weight > 0 and bank is not None:
        contrast = contrastive_loss(model.head.project(feat), targets, bank, cfg.temperature)
    return total_classification_loss(logits, targets, contrast, cfg.contrastive_weight)


def predict(model, prepared: _Prepared, idx=None, batch_size: int = 64) -> list[np.ndarray] | np.ndarray:
    model.eval()
    n = len(prepared.data)
    idx = np.arange(n) if idx is None else np.asarray(idx)
    out = []
    with T.no_grad():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            b = prepared.take(chunk)
            if isinstance(model, PointSegmenter):
                logits = model(b).data
                out.extend(list(logits.argmax(-1)))
            else:
                logits = model(b)[0].data
                out.append(logits.argmax(-1))
    if isinstance(model, PointSegmenter):
        return out
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, data: Dataset | _Prepared) -> dict[str, float]:
    """Classification: overall accuracy. Segmentation: accuracy, mAcc, mIoU."""
    prepared = data if isinstance(data, _Prepared) else _Prepared(model, data)
    if len(prepared.data) == 0:
        raise ArgumentError("cannot evaluate an empty split")
    pred = predict(model, prepared)
    if isinstance(model, PointSegmenter):
        return segmentation_metrics(pred, prepared.data.point_labels, model.cfg.num_classes)
    return {"accuracy": accuracy(pred, prepared.data.labels)}


def dataset_loss(model, data: Dataset | _Prepared, batch_size: int = 64) -> float:
    """Mean training objective (cross-entropy) over a whole dataset in eval mode."""
    prepared = data if isinstance(data, _Prepared) else _Prepared(model, data)
    model.eval()
    n = len(prepared.data)
    total = 0.0
    with T.no_grad():
        for s in range(0, n, batch_size):
            idx = np.arange(s, min(s + batch_size, n))
            if isinstance(model, PointSegmenter):
                logits = model(prepared.take(idx))
                logits = T.reshape(logits, (-1, logits.shape[-1]))
            else:
                logits = model(prepared.take(idx))[0]
            total += T.cross_entropy(logits, prepared.targets(idx)).item() * len(idx)
    return total / n


def _check_finite(loss, params, step: int, lr: float) -> None:
    if np.isfinite(loss.data).all():
        return
    bad = next((i for i, p in enumerate(params) if not np.isfinite(p.data).all()), None)
    where = f"parameter #{bad} {params[bad].shape}" if bad is not None else "loss only"
    raise NumericalError(f"non-finite loss at step {step} (lr={lr:g}); offending tensor: {where}")


def train(model, train_data: Dataset, cfg: TrainConfig, test_data: Dataset | None = None,
          bank: TextFeatureBank | None = None, on_epoch=None, on_step=None) -> TrainReport:
    """Minibatch AdamW on the model's trainable tensors.

    Epoch 0 of the report holds the metrics of the untouched model. Under
    a fixed seed the run is deterministic. ``on_step(step, model)`` runs after
    every optimizer update; a true return value stops training.
    """
    rng = np.random.default_rng(cfg.seed)
    params = optimized_parameters(model)
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    report = TrainReport()
    train_p = _Prepared(model, train_data)
    test_p = _Prepared(model, test_data) if test_data is not None and len(test_data) else None
    n = len(train_data)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    metric_name = "mIoU" if isinstance(model, PointSegmenter) else "accuracy"

    def record(epoch: int, loss: float | None):
        if loss is not None:
            report.add(epoch, "train", "loss", loss)
        if test_p is not None:
            for k, v in evaluate(model, test_p).items():
                report.add(epoch, "test", k, v)
        report.backbone_hashes.append(backbone_hashes(model))
        report.wall_time.append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    record(0, None)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model.train()
            loss = _loss(model, train_p.take(idx), train_p.targets(idx), cfg, bank, rng)
            lr = cosine_lr(cfg.lr, step, total_steps) if cfg.schedule == "cosine" else cfg.lr
            _check_finite(loss, params, step, lr)
            if params and loss.requires_grad:
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            report.step_losses.append(loss.item())
            total += loss.item() * len(idx)
            step += 1
            if on_step is not None and on_step(step, model):
                model.eval()
                return report
        model.eval()
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch, total / n)
            log.info("epoch %d loss %.4f %s %.4f", epoch, total / n, metric_name,
                     report.last("test", metric_name))
            if on_epoch is not None:
                on_epoch(epoch, report)
            if cfg.target is not None and report.last("test", metric_name) >= cfg.target:
                break
    model.eval()
    return report


# ----------------------------------------------------------------- few-shot

@dataclass
class FewShotEpisode:
    way: int
    shot: int
    classes: list[int]
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int


def _pools(labels: np.ndarray, split: np.ndarray | None):
    if split is None:
        return labels, np.arange(len(labels)), None
    split = np.asarray(split)
    return labels, np.flatnonzero(split == "train"), np.flatnonzero(split == "test")


def sample_kway_nshot(labels, way: int, shot: int, seed: int, split=None,
                      test_per_class: int = FEWSHOT_TEST_PER_CLASS) -> FewShotEpisode:
    """Pick ``way`` classes uniformly, then ``shot`` train and 20 test samples each.

    With a ``split`` array, train samples come from "train" entries and test
    samples from "test" entries; otherwise both are drawn, disjointly, from
    the same pool.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    _, train_pool, test_pool = _pools(labels, split)
    classes = np.unique(labels)
    if way > len(classes):
        raise ArgumentError(f"{way}-way episode needs {way} classes, dataset has {len(classes)}")
    chosen = np.sort(rng.choice(classes, size=way, replace=False))
    tr, te = [], []
    for c in chosen:
        c_train = train_pool[labels[train_pool] == c]
        if test_pool is None:
            need = shot + test_per_class
            if len(c_train) < need:
                raise ArgumentError(f"class {int(c)} has {len(c_train)} samples, episode needs {need}")
            pick = rng.choice(c_train, size=need, replace=False)
            tr.append(np.sort(pick[:shot]))
            te.append(np.sort(pick[shot:]))
            continue
        c_test = test_pool[labels[test_pool] == c]
        if len(c_train) < shot:
            raise ArgumentError(f"class {int(c)} has {len(c_train)} train samples, episode needs {shot}")
        if len(c_test) < test_per_class:
            raise ArgumentError(f"class {int(c)} has {len(c_test)} test samples, episode needs {test_per_class}")
        tr.append(np.sort(rng.choice(c_train, size=shot, replace=False)))
        te.append(np.sort(rng.choice(c_test, size=test_per_class, replace=False)))
    return FewShotEpisode(way, shot, [int(c) for c in chosen], np.concatenate(tr), np.concatenate(te), seed)


def sample_16shot(labels, seed: int, split=None, shot: int = 16) -> FewShotEpisode:
    """``shot`` training samples from every class; the whole test pool is kept."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    _, train_pool, test_pool = _pools(labels, split)
    classes = np.unique(labels)
    tr = []
    for c in classes:
        c_train = train_pool[labels[train_pool] == c]
        if len(c_train) < shot:
            raise ArgumentError(f"class {int(c)} has {len(c_train)} train samples, {shot}-shot needs {shot}")
        tr.append(np.sort(rng.choice(c_train, size=shot, replace=False)))
    train_idx = np.concatenate(tr)
    if test_pool is None:
        test_idx = np.setdiff1d(np.arange(len(labels)), train_idx)
    else:
        test_idx = test_pool
    return FewShotEpisode(len(classes), shot, [int(c) for c in classes], train_idx, test_idx, seed)
