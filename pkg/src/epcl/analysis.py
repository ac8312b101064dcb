"""Cross-modal feature alignment through the shared backbone, embedding export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .models import prepare_clouds
from .tokenization import TokenSequence, assemble, tokenize_image

ZERO_VARIANCE = 0.0
ESTIMATORS = ("pearson", "cosine")
POOLS = ("mean", "cls")


@dataclass
class AlignmentMatrix:
    values: np.ndarray  # (C2, C3)
    layer: int
    names_2d: list[str]
    names_3d: list[str]
    flagged: np.ndarray  # True where an input had zero variance

    def diagonal(self) -> np.ndarray:
        """Correlation of same-named categories, in ``names_2d`` order."""
        cols = {n: j for j, n in enumerate(self.names_3d)}
        return np.array([self.values[i, cols[n]] for i, n in enumerate(self.names_2d) if n in cols])


def cross_correlation(feats2d: np.ndarray, feats3d: np.ndarray, layer: int = 0,
                      names_2d: Sequence[str] | None = None, names_3d: Sequence[str] | None = None,
                      estimator: str = "pearson") -> AlignmentMatrix:
    """Correlation of every 2D category-mean vector with every 3D one.

    Pearson centres each vector over its feature dimensions; ``cosine`` does
    not. A zero-norm (after centring) vector makes its entries undefined;
    they are set to ``ZERO_VARIANCE`` and flagged.
    """
    a = np.atleast_2d(np.asarray(feats2d, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats3d, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ArgumentError("need at least one category on each side")
    if estimator not in ESTIMATORS:
        raise ArgumentError(f"unknown estimator {estimator!r}")
    if estimator == "pearson":
        a = a - a.mean(axis=1, keepdims=True)
        b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-300)
    bad_a = na <= 1e-12 * scale * np.sqrt(a.shape[1])
    bad_b = nb <= 1e-12 * scale * np.sqrt(b.shape[1])
    flagged = bad_a[:, None] | bad_b[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (a @ b.T) / (na[:, None] * nb[None, :])
    r = np.clip(r, -1.0, 1.0)
    if flagged.any():
        warnings.warn(f"{int(flagged.sum())} correlation entries undefined (zero variance); "
                      f"set to {ZERO_VARIANCE}", RuntimeWarning, stacklevel=2)
        r[flagged] = ZERO_VARIANCE
    n2 = list(names_2d) if names_2d is not None else [str(i) for i in range(len(a))]
    n3 = list(names_3d) if names_3d is not None else [str(i) for i in range(len(b))]
    return AlignmentMatrix(r, layer, n2, n3, flagged)


def _pool(layer_out: T.Tensor, seq: TokenSequence, pool: str) -> np.ndarray:
    x = layer_out.data
    if pool == "cls":
        return x[..., 0, :]
    return x[..., 1 + seq.num_task:, :].mean(axis=-2)


def point_layer_features(model, clouds, pool: str = "mean", batch_size: int = 64) -> list[np.ndarray]:
    """Per-layer (n, D) global features of clouds; L + 1 entries."""
    model.eval()
    cfg = model.cfg
    per_layer: list[list[np.ndarray]] = []
    with T.no_grad():
        for s in range(0, len(clouds), batch_size):
            batch = prepare_clouds(clouds[s:s + batch_size], cfg.patches, cfg.neighbors)
            seq = model.tokens(batch)
            out = model.backbone(seq)
            feats = [_pool(x, seq, pool) for x in out.layers]
            if not per_layer:
                per_layer = [[] for _ in feats]
            for acc, f in zip(per_layer, feats):
                acc.append(f)
    return [np.concatenate(f) for f in per_layer]


def image_layer_features(backbone, images, pool: str = "mean", batch_size: int = 64) -> list[np.ndarray]:
    backbone.eval()
    per_layer: list[list[np.ndarray]] = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            batch = np.stack([np.asarray(im, dtype=np.float32) / 255.0 for im in images[s:s + batch_size]])
            seq = tokenize_image(batch, backbone.image_tokenizer)
            out = backbone(seq)
            feats = [_pool(x, seq, pool) for x in out.layers]
            if not per_layer:
                per_layer = [[] for _ in feats]
            for acc, f in zip(per_layer, feats):
                acc.append(f)
    return [np.concatenate(f) for f in per_layer]


@dataclass
class AlignmentCurve:
    values: list[float]  # mean matched-category correlation per layer
    matrices: list[AlignmentMatrix]

    def to_text(self) -> str:
        lines = ["layer,mean_diagonal_correlation"]
        lines += [f"{i},{v!r}" for i, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"


Extractor = Callable[[list], list[np.ndarray]]


def alignment_curve(inputs_2d: dict[str, list], inputs_3d: dict[str, list],
                    extract_2d: Extractor, extract_3d: Extractor,
                    estimator: str = "pearson") -> AlignmentCurve:
    """Per-layer mean diagonal correlation between category-mean features.

    ``extract_*`` map a list of inputs to per-layer (n, D) feature arrays.
    """
    names = [n for n in inputs_2d if n in inputs_3d]
    if not names:
        raise ArgumentError("no category is present in both modalities")
    for n in names:
        if not inputs_2d[n] or not inputs_3d[n]:
            raise ArgumentError(f"category {n!r} has no samples in one modality")

    def means(inputs, extract):
        flat, owner = [], []
        for i, n in enumerate(names):
            flat.extend(inputs[n])
            owner.extend([i] * len(inputs[n]))
        owner = np.asarray(owner)
        layers = extract(flat)
        return [np.stack([f[owner == i].mean(axis=0) for i in range(len(names))]) for f in layers]

    m2 = means(inputs_2d, extract_2d)
    m3 = means(inputs_3d, extract_3d)
    if len(m2) != len(m3):
        raise DimensionError(f"extractors report {len(m2)} vs {len(m3)} layers")
    mats = [cross_correlation(a, b, layer, names, names, estimator) for layer, (a, b) in enumerate(zip(m2, m3))]
    return AlignmentCurve([float(m.diagonal().mean()) for m in mats], mats)


def model_alignment_curve(model, clouds_by_cat: dict[str, list], images_by_cat: dict[str, list],
                          pool: str = "mean", estimator: str = "pearson") -> AlignmentCurve:
    """Both modalities through the model's shared backbone."""
    return alignment_curve(
        images_by_cat, clouds_by_cat,
        lambda ims: image_layer_features(model.backbone, ims, pool),
        lambda cl: point_layer_features(model, cl, pool),
        estimator,
    )


def format_matrix(m: AlignmentMatrix) -> str:
    lines = [f"# layer {m.layer}", "category," + ",".join(m.names_3d)]
    for name, row in zip(m.names_2d, m.values):
        lines.append(name + "," + ",".join(f"{v!r}" for v in row))
    return "\n".join(lines) + "\n"


def export_embeddings(model, dataset, path: str | Path, layer: int = -1, pool: str = "cls") -> int:
    """Write ``sample_id,label,f0..f{D-1}`` rows; ``layer=-1`` is the final LN output.

    Returns the number of rows written.
    """
    D = model.backbone.cfg.width
    header = "sample_id,label," + ",".join(f"f{i}" for i in range(D))
    lines = [header]
    if len(dataset):
        if layer == -1:
            feats = _final_features(model, dataset.clouds, pool)
        else:
            per_layer = point_layer_features(model, dataset.clouds, pool)
            if not -len(per_layer) <= layer < len(per_layer):
                raise ArgumentError(f"layer {layer} outside 0..{len(per_layer) - 1}")
            feats = per_layer[layer]
        ids = dataset.ids or [str(i) for i in range(len(dataset))]
        for sid, lab, row in zip(ids, dataset.labels, feats):
            lines.append(f"{sid},{dataset.class_names[int(lab)]}," + ",".join(f"{float(v):.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
    return len(lines) - 1


def _final_features(model, clouds, pool: str, batch_size: int = 64) -> np.ndarray:
    model.eval()
    cfg = model.cfg
    out = []
    with T.no_grad():
        for s in range(0, len(clouds), batch_size):
            batch = prepare_clouds(clouds[s:s + batch_size], cfg.patches, cfg.neighbors)
            seq = model.tokens(batch)
            out.append(_pool(model.backbone(seq).final, seq, pool))
    return np.concatenate(out)
