"""Plain-text and raw file formats: clouds, manifests, rasters, configs.

See FORMATS.md at the repository root for the byte-level descriptions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .training import Dataset

MANIFEST_HEADER = "# EPCL dataset manifest v1"
RASTER_MAGIC = "EPCL-RASTER"


# -------------------------------------------------------------------- clouds

def read_cloud(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """``x y z [label]`` per line; ``#`` starts a comment."""
    rows = []
    ncols = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if ncols is None:
            ncols = len(parts)
            if ncols not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 columns, got {ncols}")
        elif len(parts) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no points")
    arr = np.array(rows)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite coordinate")
    labels = arr[:, 3].astype(np.int64) if ncols == 4 else None
    return arr[:, :3], labels


def write_cloud(path: str | Path, points: np.ndarray, labels: np.ndarray | None = None) -> None:
    lines = []
    for i, p in enumerate(np.asarray(points)):
        s = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if labels is not None:
            s += f" {int(labels[i])}"
        lines.append(s)
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ manifest

def write_manifest(path: str | Path, class_names: list[str], entries: list[tuple[str, str, str, str | None]]) -> None:
    lines = [MANIFEST_HEADER, "classes " + " ".join(class_names)]
    for rel, cls, split, image in entries:
        lines.append(" ".join([rel, cls, split] + ([image] if image else [])))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> tuple[list[str], list[tuple[str, str, str, str | None]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    classes: list[str] | None = None
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "classes":
            classes = parts[1:]
            continue
        if len(parts) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 'path class split [image]'")
        if parts[2] not in ("train", "test"):
            raise FormatError(f"{path}:{lineno}: split must be train or test, got {parts[2]!r}")
        entries.append((parts[0], parts[1], parts[2], parts[3] if len(parts) == 4 else None))
    if classes is None:
        raise FormatError(f"{path}: missing 'classes' line")
    unknown = {e[1] for e in entries} - set(classes)
    if unknown:
        raise FormatError(f"{path}: entries reference undeclared classes {sorted(unknown)}")
    return classes, entries


def load_dataset(manifest: str | Path, with_images: bool = False):
    """Read a manifest and every cloud it lists (and optionally images)."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    classes, entries = read_manifest(manifest)
    root = manifest.parent
    clouds, plabels, labels, split, ids, images = [], [], [], [], [], []
    for rel, cls, sp, image in entries:
        pts, lab = read_cloud(root / rel)
        clouds.append(pts)
        plabels.append(lab)
        labels.append(classes.index(cls))
        split.append(sp)
        ids.append(Path(rel).stem)
        if with_images:
            if image is None:
                raise DataError(f"{rel}: no image listed for alignment")
            images.append(read_raster(root / image))
    point_labels = plabels if plabels and all(p is not None for p in plabels) else None
    ds = Dataset(clouds, np.array(labels, dtype=np.int64), classes, point_labels,
                 np.array(split), ids)
    return (ds, images) if with_images else ds


# -------------------------------------------------------------------- raster

def write_raster(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    H, W, C = img.shape
    Path(path).write_bytes(f"{RASTER_MAGIC} v1 {H} {W} {C}\n".encode() + img.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    head = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(head) != 5 or head[0] != RASTER_MAGIC or head[1] != "v1":
        raise FormatError(f"{path}: expected header '{RASTER_MAGIC} v1 H W C'")
    H, W, C = (int(x) for x in head[2:])
    body = data[nl + 1:]
    if len(body) != H * W * C:
        raise FormatError(f"{path}: {len(body)} payload bytes, header declares {H * W * C}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, C).copy()


# -------------------------------------------------------------------- config

def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out
