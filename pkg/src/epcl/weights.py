"""EPCLWGT1: a little-endian named-tensor container with frozen flags.

Layout::

    8 bytes   magic "EPCLWGT1"
    u32       format version (1)
    u32       tensor count
    per tensor:
      u16       name length, then UTF-8 name
      u8        frozen flag (0/1)
      u8        dtype code (0 = float32)
      u8        rank, then rank x u32 dims
      zero padding up to the next 64-byte file offset
      raw float32 payload
    optional trailer:
      4 bytes   "META", u32 length, UTF-8 ``key=value`` lines
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BACKBONE_PREFIX, TransformerConfig, config_from_metadata, expected_backbone_shapes
from .errors import FormatError

MAGIC = b"EPCLWGT1"
VERSION = 1
ALIGN = 64
META_TAG = b"META"
DTYPE_CODES = {0: np.dtype("<f4")}


@dataclass
class WeightContainer:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray, frozen: bool) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        self.tensors[name] = np.ascontiguousarray(array, dtype=np.float32)
        self.frozen[name] = bool(frozen)

    def names(self) -> list[str]:
        return list(self.tensors)

    def backbone_config(self, **overrides) -> TransformerConfig:
        return config_from_metadata(self.metadata, **overrides)

    def digest(self, name: str) -> str:
        return tensor_digest(self.tensors[name])


def tensor_digest(array: np.ndarray) -> str:
    arr = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def from_parameters(params, metadata: dict[str, str] | None = None) -> WeightContainer:
    """Snapshot ``(name, Parameter)`` pairs; frozen means ``requires_grad`` is off."""
    c = WeightContainer(metadata=dict(metadata or {}))
    for name, p in params:
        c.add(name, p.data, not p.requires_grad)
    return c


def save_weights(container: WeightContainer, path: str | Path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(container.tensors))
    for name, arr in container.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BBB", int(container.frozen.get(name, False)), 0, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += b"\0" * (-len(buf) % ALIGN)
        buf += arr.tobytes()
    if container.metadata:
        text = "".join(f"{k}={v}\n" for k, v in sorted(container.metadata.items())).encode("utf-8")
        buf += META_TAG + struct.pack("<I", len(text)) + text
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path: str | Path, validate: bool = True) -> WeightContainer:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not an EPCLWGT1 file")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    c = WeightContainer()
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor #{i}")
        try:
            name = r.take(n, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor #{i}: name is not valid UTF-8") from exc
        frozen, code, rank = r.unpack("<BBB", f"header of tensor {name!r}")
        if code not in DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        if frozen not in (0, 1):
            raise FormatError(f"tensor {name!r}: frozen flag must be 0 or 1, got {frozen}")
        dims = r.unpack(f"<{rank}I", f"dims of tensor {name!r}")
        r.take(-r.pos % ALIGN, f"padding of tensor {name!r}")
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of tensor {name!r}")
        if name in c.tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        c.tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
        c.frozen[name] = bool(frozen)
    if r.pos < len(data):
        if r.take(4, "trailer tag") != META_TAG:
            raise FormatError(f"{path}: unexpected bytes after tensor table")
        (n,) = r.unpack("<I", "metadata length")
        text = r.take(n, "metadata").decode("utf-8")
        for line in text.splitlines():
            if line:
                k, _, v = line.partition("=")
                c.metadata[k] = v
        if r.pos != len(data):
            raise FormatError(f"{path}: unexpected bytes after metadata")
    if validate:
        validate_backbone(c)
    return c


def validate_backbone(c: WeightContainer) -> None:
    """Check backbone tensor shapes against the declared width and depth."""
    if "width" not in c.metadata:
        return
    try:
        cfg = c.backbone_config()
    except ValueError as exc:
        raise FormatError(f"bad metadata: {exc}") from exc
    expected = expected_backbone_shapes(cfg)
    for short, shape in expected.items():
        name = BACKBONE_PREFIX + short
        if name not in c.tensors:
            raise FormatError(f"tensor {name!r} missing for declared width {cfg.width} / {cfg.layers} layers")
        if c.tensors[name].shape != shape:
            raise FormatError(
                f"tensor {name!r} has shape {c.tensors[name].shape}, expected {shape} "
                f"for declared width {cfg.width}")
    for name in c.tensors:
        if name.startswith(BACKBONE_PREFIX) and name[len(BACKBONE_PREFIX):] not in expected:
            raise FormatError(f"tensor {name!r} is not part of a {cfg.layers}-layer backbone")
