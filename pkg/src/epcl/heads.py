"""Task heads and losses: classification with text alignment, segmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from . import tensor as T
from .errors import ArgumentError, ConfigError, FormatError
from .nn import MLP, Linear, Module, Parameter
from .tensor import Tensor
from .tokenization import assemble

TEXTBANK_HEADER = "EPCL-TEXTBANK"


class ClassificationHead(Module):
    """Three-layer MLP on the CLS feature, plus a projection for text alignment."""

    def __init__(self, width: int, num_classes: int, rng: np.random.Generator, hidden: int = 256,
                 dropout: float = 0.2, text_width: int | None = None, dtype=np.float32):
        self.fc1 = Linear(width, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype=dtype)
        self.fc3 = Linear(hidden, num_classes, rng, dtype=dtype)
        self.dropout = dropout
        self.num_classes = num_classes
        self.text_proj = Linear(width, text_width, rng, dtype=dtype) if text_width else None

    def __call__(self, cls_feature: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = T.dropout(T.relu(self.fc1(cls_feature)), self.dropout, self.training, rng)
        h = T.dropout(T.relu(self.fc2(h)), self.dropout, self.training, rng)
        return self.fc3(h)

    def project(self, cls_feature: Tensor) -> Tensor:
        if self.text_proj is None:
            raise ConfigError("head was built without a text projection")
        return self.text_proj(cls_feature)


def cls_feature(final: Tensor) -> Tensor:
    """Sequence position 0 of the final (layer-normed) backbone output."""
    return final[..., 0, :]


def classify(final: Tensor, head: ClassificationHead, rng: np.random.Generator | None = None) -> Tensor:
    return head(cls_feature(final), rng)


@dataclass
class TextFeatureBank:
    labels: list[str]
    vectors: np.ndarray  # (C, D_text), unit rows
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.labels):
            raise FormatError(f"text bank has {len(self.labels)} labels but vectors {v.shape}")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if (norms == 0).any():
            raise FormatError("text bank contains a zero vector")
        self.vectors = v / norms

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def load_text_bank(path: str | Path) -> TextFeatureBank:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise FormatError(f"{path}: empty text bank")
    head = lines[0].split()
    if len(head) != 4 or head[0] != TEXTBANK_HEADER or head[1] != "v1":
        raise FormatError(f"{path}: expected header '{TEXTBANK_HEADER} v1 C D_text'")
    C, D = int(head[2]), int(head[3])
    if len(lines) - 1 != C:
        raise FormatError(f"{path}: header declares {C} classes, found {len(lines) - 1} rows")
    labels, rows = [], []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != D + 1:
            raise FormatError(f"{path}:{i}: expected label + {D} floats, got {len(parts)} fields")
        labels.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    return TextFeatureBank(labels, np.array(rows), source=str(path))


def save_text_bank(bank: TextFeatureBank, path: str | Path) -> None:
    out = [f"{TEXTBANK_HEADER} v1 {bank.num_classes} {bank.width}"]
    for label, row in zip(bank.labels, bank.vectors):
        out.append(label + " " + " ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(out) + "\n")


def contrastive_loss(projections: Tensor, labels, bank: TextFeatureBank | np.ndarray,
                     temperature: float = 0.07) -> Tensor:
    """Cross-entropy over cosine similarities to every class text vector."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    vectors = bank.vectors if isinstance(bank, TextFeatureBank) else np.asarray(bank)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.max() >= len(vectors) or labels.min() < 0):
        raise IndexError(f"label {int(labels.max())} out of range for a bank of {len(vectors)}")
    z = T.l2_normalize(projections, axis=-1)
    bank_t = Tensor(vectors.T.astype(projections.dtype))
    logits = T.matmul(z, bank_t) * (1.0 / temperature)
    return T.cross_entropy(logits, labels)


def total_classification_loss(logits: Tensor, labels, contrastive: Tensor | None = None,
                              weight: float = 1.0) -> Tensor:
    """cross_entropy + weight * contrastive; ``weight == 0`` drops the text term."""
    if weight < 0:
        raise ConfigError(f"contrastive weight must be >= 0, got {weight}")
    ce = T.cross_entropy(logits, labels)
    if weight == 0:
        return ce
    if contrastive is None:
        raise ConfigError("contrastive weight > 0 but no text feature bank was supplied")
    return ce + contrastive * weight


# ---------------------------------------------------------------- segmentation

@dataclass
class SegmentationGeometry:
    """Per-cloud index structures, computed once and reused every epoch."""

    levels: list[np.ndarray]  # level 0 = input points, then each down stage's centers
    group_idx: list[np.ndarray]  # stage s: (M_s, K) indices into level s
    up_idx: list[np.ndarray]  # stage s: (|level s|, 3) indices into level s+1
    up_w: list[np.ndarray]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.levels[1:])


def stage_counts(num_points: int, stage_points: tuple[int, ...] | None) -> tuple[int, ...]:
    if stage_points:
        return tuple(stage_points)
    return (num_points // 2, num_points // 4, num_points // 8)


def segmentation_geometry(points: np.ndarray, stage_points: tuple[int, ...] | None = None,
                          k: int = 16, interp_k: int = 3) -> SegmentationGeometry:
    pts = np.asarray(points, dtype=np.float64)
    counts = stage_counts(len(pts), stage_points)
    levels, groups, up_idx, up_w = [pts], [], [], []
    for m in counts:
        prev = levels[-1]
        if m > len(prev):
            raise ArgumentError(f"stage of {m} points cannot follow a level of {len(prev)}")
        centers = prev[geometry.farthest_point_sample(prev, m)]
        idx, _ = geometry.knn_indices(prev, centers, min(k, len(prev)))
        levels.append(centers)
        groups.append(idx)
    for s in range(len(counts)):
        i, w = geometry.interpolation_weights(levels[s + 1], levels[s], min(interp_k, len(levels[s + 1])))
        up_idx.append(i)
        up_w.append(w)
    return SegmentationGeometry(levels, groups, up_idx, up_w)


def stack_geometry(geos: list[SegmentationGeometry]) -> SegmentationGeometry:
    return SegmentationGeometry(
        [np.stack(x) for x in zip(*(g.levels for g in geos))],
        [np.stack(x) for x in zip(*(g.group_idx for g in geos))],
        [np.stack(x) for x in zip(*(g.up_idx for g in geos))],
        [np.stack(x) for x in zip(*(g.up_w for g in geos))],
    )


class SegmentationPipeline(Module):
    """Hierarchical tokenizer (transition down x3) and decoder (transition up x3).

    Level-0 features are the raw coordinates. Each down stage groups ``k``
    neighbours around FPS centers, concatenates their features with
    center-relative offsets, applies a shared MLP and max-pools. The coarsest
    tokens go through the backbone; each up stage interpolates from the
    coarser level, concatenates that level's down-path features and applies
    a shared MLP.
    """

    def __init__(self, width: int, num_classes: int, rng: np.random.Generator,
                 stage_widths: tuple[int, int] = (64, 128), num_points: int = 1024,
                 stage_points: tuple[int, ...] | None = None, k: int = 16, dtype=np.float32):
        self.num_points = num_points
        self.stage_points = stage_counts(num_points, stage_points)
        if len(self.stage_points) != 3:
            raise ConfigError(f"segmentation needs three stages, got {self.stage_points}")
        self.k = k
        w1, w2 = stage_widths
        widths = [3, w1, w2, width]
        self.down = [MLP([widths[s] + 3, widths[s + 1], widths[s + 1]], rng, dtype=dtype) for s in range(3)]
        self.pos = MLP([3, 128, width], rng, dtype=dtype)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(width,)), dtype=dtype)
        # up[0] maps the coarsest level to level 2, ..., up[2] maps to level 0
        self.up = [
            MLP([width + w2, w2], rng, dtype=dtype, final_activation=True),
            MLP([w2 + w1, w1], rng, dtype=dtype, final_activation=True),
            MLP([w1 + 3, w1], rng, dtype=dtype, final_activation=True),
        ]
        self.classifier = Linear(w1, num_classes, rng, dtype=dtype)
        self.num_classes = num_classes

    def geometry(self, points: np.ndarray) -> SegmentationGeometry:
        if len(points) != self.num_points:
            raise ArgumentError(f"pipeline expects {self.num_points} points, got {len(points)}")
        return segmentation_geometry(points, self.stage_points, self.k)

    def encode(self, geo: SegmentationGeometry, dtype=np.float32) -> list[Tensor]:
        """Down path on batched geometry; returns features for levels 0..3."""
        feats = [Tensor(geo.levels[0].astype(dtype))]
        for s in range(3):
            prev_xyz = geo.levels[s]
            idx = geo.group_idx[s]  # (B, M, K)
            centers = geo.levels[s + 1]
            nb_xyz = _gather_np(prev_xyz, idx)
            rel = Tensor((nb_xyz - centers[:, :, None, :]).astype(dtype))
            nb_feat = T.gather(feats[-1], idx)
            h = self.down[s](T.concat([nb_feat, rel], axis=-1))
            feats.append(T.max_(h, axis=-2))
        return feats

    def decode(self, coarse: Tensor, feats: list[Tensor], geo: SegmentationGeometry) -> Tensor:
        """Up path from (B, M3, D) coarse features to (B, A, C) logits."""
        x = coarse
        for j, s in enumerate((2, 1, 0)):
            up = geometry.interpolate_with(x, geo.up_idx[s], geo.up_w[s])
            x = self.up[j](T.concat([up, feats[s]], axis=-1))
        return self.classifier(x)


def _gather_np(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """(B, S, 3) and (B, M, K) -> (B, M, K, 3)."""
    b = np.arange(points.shape[0]).reshape(-1, 1, 1)
    return points[b, idx]


def segment(points_or_geo, pipeline: SegmentationPipeline, backbone, task_token=None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Per-point logits (A, C) for one cloud, or (B, A, C) for stacked geometry."""
    if isinstance(points_or_geo, SegmentationGeometry):
        geo, single = points_or_geo, points_or_geo.levels[0].ndim == 2
    else:
        pts = points_or_geo.points if isinstance(points_or_geo, geometry.PointCloud) else np.asarray(points_or_geo)
        geo, single = pipeline.geometry(pts), True
    if single:
        geo = stack_geometry([geo])
    dtype = pipeline.cls_token.dtype
    feats = pipeline.encode(geo, dtype)
    pos = pipeline.pos(Tensor(geo.levels[3].astype(dtype)))
    D = pipeline.cls_token.shape[0]
    task = task_token() if task_token is not None else Tensor(np.zeros((0, D), dtype=dtype))
    seq = assemble(pipeline.cls_token, task, feats[3], pos)
    out = backbone(seq, rng)
    coarse = out.final[:, 1 + seq.num_task:, :]
    logits = pipeline.decode(coarse, feats, geo)
    return logits[0] if single else logits
