"""Point-cloud kernels: FPS, kNN grouping, patch normalization, interpolation.

Distances are compared as exact squared Euclidean sums ``sum((a - b)**2)``;
whenever two candidates tie, the lower point index wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DataError
from .tensor import Tensor

INTERP_EPS = 1e-8
_CHUNK = 256


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"point cloud must be A x 3, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise DataError("point cloud contains NaN or Inf coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise DataError(f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    center_indices: np.ndarray  # (M,)
    centers: np.ndarray  # (M, 3)
    member_indices: np.ndarray  # (M, K)

    @property
    def M(self) -> int:
        return self.member_indices.shape[0]

    @property
    def K(self) -> int:
        return self.member_indices.shape[1]


def _coords(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def farthest_point_sample(cloud, M: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``M`` indices starting at ``start``."""
    pts = _coords(cloud)
    A = len(pts)
    if not 1 <= M <= A:
        raise ArgumentError(f"cannot sample {M} points from a cloud of {A}")
    if not 0 <= start < A:
        raise ArgumentError(f"start index {start} outside cloud of {A} points")
    chosen = np.empty(M, dtype=np.int64)
    mind = np.full(A, np.inf)
    cur = start
    for i in range(M):
        chosen[i] = cur
        diff = pts - pts[cur]
        d = (diff * diff).sum(axis=1)
        np.minimum(mind, d, out=mind)
        mind[cur] = -1.0
        if i + 1 < M:
            cur = int(np.argmax(mind))
    return chosen


def _sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=-1)


def knn_indices(points: np.ndarray, queries: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (Q, K) and squared distances of the K nearest ``points`` per query."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    A = len(points)
    if not 1 <= K <= A:
        raise ArgumentError(f"cannot take {K} neighbours from {A} points")
    idx = np.empty((len(queries), K), dtype=np.int64)
    dist = np.empty((len(queries), K))
    for s in range(0, len(queries), _CHUNK):
        d = _sq_dists(queries[s:s + _CHUNK], points)
        order = np.argsort(d, axis=1, kind="stable")[:, :K]
        idx[s:s + _CHUNK] = order
        dist[s:s + _CHUNK] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def knn_group(cloud, centers: np.ndarray, K: int, center_indices: np.ndarray | None = None) -> PatchSet:
    pts = _coords(cloud)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    idx, _ = knn_indices(pts, centers, K)
    if center_indices is None:
        center_indices = np.full(len(centers), -1, dtype=np.int64)
    return PatchSet(np.asarray(center_indices), centers, idx)


def build_patches(cloud, M: int, K: int, start: int = 0) -> PatchSet:
    """FPS centers followed by kNN grouping."""
    pts = _coords(cloud)
    centers_idx = farthest_point_sample(pts, M, start)
    return knn_group(pts, pts[centers_idx], K, centers_idx)


def normalize_patch(patch: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Center-relative coordinates of a (..., K, 3) patch."""
    return np.asarray(patch) - np.asarray(center).reshape(*np.shape(center)[:-1], 1, 3)


def patch_coordinates(cloud, patches: PatchSet) -> np.ndarray:
    """(M, K, 3) center-relative coordinates of every patch member."""
    pts = _coords(cloud)
    return normalize_patch(pts[patches.member_indices], patches.centers)


def interpolation_weights(sources: np.ndarray, queries: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices (Q, k) and inverse-distance weights summing to one."""
    sources = np.asarray(sources, dtype=np.float64)
    if len(sources) < k:
        raise ArgumentError(f"interpolation needs at least {k} sources, got {len(sources)}")
    idx, d2 = knn_indices(sources, queries, k)
    inv = 1.0 / (np.sqrt(d2) + INTERP_EPS)
    return idx, inv / inv.sum(axis=1, keepdims=True)


def interpolate_features(sources: np.ndarray, features, queries: np.ndarray, k: int = 3):
    """Inverse-distance blend of the ``k`` nearest source features per query.

    ``features`` may be an array (S, D) or a :class:`Tensor`; a tensor input
    yields a differentiable tensor output.
    """
    idx, w = interpolation_weights(sources, queries, k)
    if isinstance(features, Tensor):
        return interpolate_with(features, idx, w)
    feats = np.asarray(features)
    return (feats[idx] * w[..., None]).sum(axis=1)


def interpolate_with(features: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Differentiable interpolation from precomputed neighbours.

    ``features`` (B, S, D) or (S, D); ``idx``/``w`` (B, Q, k) or (Q, k).
    """
    squeeze = features.ndim == 2
    if squeeze:
        features = T.reshape(features, (1,) + features.shape)
        idx, w = idx[None], w[None]
    g = T.gather(features, idx)  # (B, Q, k, D)
    out = T.sum_(g * np.asarray(w, dtype=features.dtype)[..., None], axis=2)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out
