"""Procedural shape datasets standing in for CAD and indoor-scan benchmarks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .formats import write_cloud, write_manifest, write_raster

FAMILIES = ("sphere", "cube", "cylinder", "plane", "cone", "torus")
JITTER = 0.01
IMAGE_SIZE = 32


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n, rng):
    p = rng.uniform(-1.0, 1.0, size=(n, 3))
    face = rng.integers(0, 3, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    p[np.arange(n), face] = sign
    return p


def _cylinder(n, rng):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    return np.stack([np.cos(theta), np.sin(theta), z], axis=1)


def _plane(n, rng):
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def _cone(n, rng):
    h = np.sqrt(rng.uniform(0, 1, size=n))  # uniform over lateral area
    theta = rng.uniform(0, 2 * np.pi, size=n)
    return np.stack([h * np.cos(theta), h * np.sin(theta), 1.0 - 2.0 * h], axis=1)


def _torus(n, rng):
    u = rng.uniform(0, 2 * np.pi, size=n)
    v = rng.uniform(0, 2 * np.pi, size=n)
    R, r = 0.7, 0.3
    return np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "plane": _plane,
             "cone": _cone, "torus": _torus}


def class_names(classes: int, families: tuple[str, ...] = FAMILIES) -> list[str]:
    names = []
    for c in range(classes):
        base = families[c % len(families)]
        variant = c // len(families)
        names.append(base if variant == 0 else f"{base}{variant}")
    return names


def _stretch(variant: int) -> np.ndarray:
    """Anisotropic scale distinguishing the k-th repeat of a family."""
    s = np.ones(3)
    if variant:
        s[(variant - 1) % 3] = 1.0 + 0.5 * ((variant - 1) // 3 + 1)
    return s


def sample_shape(family: str, variant: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Points and two-label halves (label 1 where x >= 0) for one shape.

    Coordinates are rounded to 6 decimals *before* labelling so that the
    written file reproduces the labels exactly.
    """
    pts = _SAMPLERS[family](n, rng) * _stretch(variant)
    if family != "plane" and family != "sphere":
        a = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
        pts = pts @ rot.T
    pts = pts + rng.uniform(-JITTER, JITTER, size=pts.shape)
    pts = np.round(pts, 6) + 0.0  # also clears -0.0
    return pts, (pts[:, 0] >= 0).astype(np.int64)


def render_depth(points: np.ndarray, size: int = IMAGE_SIZE, channels: int = 3) -> np.ndarray:
    """Top-down orthographic height map of a cloud as an 8-bit raster."""
    pts = np.asarray(points)
    lim = 1.6
    ij = np.clip(((pts[:, :2] + lim) / (2 * lim) * size).astype(np.int64), 0, size - 1)
    z = pts[:, 2]
    span = z.max() - z.min()
    val = np.round(1 + 254 * ((z - z.min()) / span if span > 0 else np.ones_like(z))).astype(np.int64)
    img = np.zeros((size, size), dtype=np.int64)
    np.maximum.at(img, (ij[:, 1], ij[:, 0]), val)
    return np.repeat(img[:, :, None], channels, axis=2).astype(np.uint8)


def gen_synthetic(out: str | Path, classes: int = 4, per_class: int = 100, points: int = 512, seed: int = 0,
                  test_fraction: float = 0.2, families: tuple[str, ...] | None = None,
                  images: bool = False) -> Path:
    """Write ``classes * per_class`` cloud files plus ``manifest.txt`` under ``out``.

    The last ``test_fraction`` of each class is marked as the test split.
    """
    fams = tuple(families) if families else FAMILIES
    if classes < 2 and not families:
        raise ArgumentError(f"need at least 2 classes, got {classes}")
    unknown = set(fams) - set(_SAMPLERS)
    if unknown:
        raise ArgumentError(f"unknown shape families {sorted(unknown)}")
    out = Path(out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    if images:
        (out / "images").mkdir(exist_ok=True)
    names = class_names(classes, fams)
    rng = np.random.default_rng(seed)
    n_test = int(round(per_class * test_fraction))
    entries = []
    for c, name in enumerate(names):
        fam, variant = fams[c % len(fams)], c // len(fams)
        for i in range(per_class):
            pts, lab = sample_shape(fam, variant, points, rng)
            rel = f"clouds/{name}_{i:04d}.txt"
            write_cloud(out / rel, pts, lab)
            img_rel = None
            if images:
                img_rel = f"images/{name}_{i:04d}.raster"
                write_raster(out / img_rel, render_depth(pts))
            split = "test" if i >= per_class - n_test else "train"
            entries.append((rel, name, split, img_rel))
    write_manifest(out / "manifest.txt", names, entries)
    return out / "manifest.txt"
