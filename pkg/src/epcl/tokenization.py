"""Token sequences for the shared backbone: points, images, task tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .errors import ArgumentError, ConfigError
from .nn import MLP, Linear, Module, Parameter
from .tensor import Tensor


@dataclass
class TokenSequence:
    """Backbone input laid out as ``[CLS | task tokens | content tokens]``.

    ``tokens`` and ``positional`` share shape (..., 1 + G + M, D). The
    backbone consumes ``tokens + positional``.
    """

    tokens: Tensor
    positional: Tensor
    num_task: int
    num_content: int

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    def embeddings(self) -> Tensor:
        return self.tokens + self.positional

    def content_tokens(self) -> Tensor:
        return self.tokens[..., 1 + self.num_task:, :]

    def content_positional(self) -> Tensor:
        return self.positional[..., 1 + self.num_task:, :]


class PointTokenizer(Module):
    """Mini-PointNet patch encoder plus a center-coordinate positional MLP.

    Per patch: shared MLP 3->128->256, max-pool, concatenate the pooled
    feature onto every point, shared MLP 512->D->D, max-pool.
    """

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32):
        self.width = width
        self.first = MLP([3, 128, 256], rng, dtype=dtype)
        self.second = MLP([512, width, width], rng, dtype=dtype)
        self.pos = MLP([3, 128, width], rng, dtype=dtype)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(width,)), dtype=dtype)

    def encode_patches(self, patches: np.ndarray | Tensor) -> Tensor:
        """(..., M, K, 3) center-relative patches -> (..., M, D) tokens."""
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.cls_token.dtype))
        h = self.first(x)  # (..., M, K, 256)
        pooled = T.max_(h, axis=-2, keepdims=True)
        # concat([pooled, h]) @ W == pooled @ W[:256] + h @ W[256:]; the
        # pooled half is evaluated once per patch instead of once per point
        lin, rest = self.second.layers[0], self.second.layers[1:]
        c = pooled.shape[-1]
        h = T.matmul(pooled, lin.weight[:c]) + T.matmul(h, lin.weight[c:]) + lin.bias
        for layer in rest:
            h = layer(T.relu(h))
        return T.max_(h, axis=-2)

    def positional(self, centers: np.ndarray | Tensor) -> Tensor:
        c = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers, dtype=self.cls_token.dtype))
        return self.pos(c)


class TaskToken(Module):
    """``G`` learnable rows from a fully-connected layer over an enumeration.

    Row ``i`` is ``fc(e_i * 1_D)`` with ``e = (0, 1, ..., G-1) / max(G-1, 1)``.
    """

    def __init__(self, count: int, width: int, rng: np.random.Generator, dtype=np.float32,
                 identity: bool = False):
        if count < 0:
            raise ConfigError(f"task token count must be >= 0, got {count}")
        self.count = count
        self.width = width
        self.fc = Linear(width, width, rng, std=0.02, dtype=dtype)
        if identity:
            self.fc.weight.data = np.eye(width, dtype=dtype)
            self.fc.bias.data = np.zeros(width, dtype=dtype)
        else:
            self.fc.bias.data = rng.normal(0.0, 0.02, size=width).astype(dtype)

    def enumeration(self) -> np.ndarray:
        e = np.arange(self.count, dtype=np.float64) / max(self.count - 1, 1)
        return np.repeat(e[:, None], self.width, axis=1).astype(self.fc.weight.dtype)

    def __call__(self) -> Tensor:
        if self.count == 0:
            return Tensor(np.zeros((0, self.width), dtype=self.fc.weight.dtype))
        return self.fc(Tensor(self.enumeration()))


def make_task_tokens(G: int, width: int, rng: np.random.Generator | None = None, **kw) -> TaskToken:
    return TaskToken(G, width, rng if rng is not None else np.random.default_rng(0), **kw)


def assemble(cls_token: Tensor, task: Tensor, content: Tensor, content_pos: Tensor,
             prefix_pos: Tensor | None = None) -> TokenSequence:
    """Build ``[CLS | task | content]`` for batched (B, M, D) or single (M, D) content."""
    D = content.shape[-1]
    lead = content.shape[:-2]
    G = task.shape[0]
    cls = T.broadcast_to(T.reshape(cls_token, (1, D)), lead + (1, D))
    parts = [cls]
    if G:
        parts.append(T.broadcast_to(task, lead + (G, D)))
    parts.append(content)
    tokens = T.concat(parts, axis=-2)
    if prefix_pos is None:
        prefix_pos = Tensor(np.zeros(lead + (1 + G, D), dtype=content.dtype))
    else:
        prefix_pos = T.broadcast_to(prefix_pos, lead + (1 + G, D))
    positional = T.concat([prefix_pos, content_pos], axis=-2)
    return TokenSequence(tokens, positional, G, content.shape[-2])


def tokenize_points(cloud, M: int, K: int, tokenizer: PointTokenizer, task_token: TaskToken | None = None,
                    start: int = 0) -> TokenSequence:
    """Single cloud -> ``[CLS | task | M point tokens]`` with positional embeddings."""
    pts = geometry._coords(cloud)
    patches = geometry.build_patches(pts, M, K, start)
    local = geometry.patch_coordinates(pts, patches)
    content = tokenizer.encode_patches(local)
    pos = tokenizer.positional(patches.centers)
    task = task_token() if task_token is not None else Tensor(np.zeros((0, tokenizer.width), dtype=content.dtype))
    return assemble(tokenizer.cls_token, task, content, pos)


class ImageTokenizer(Module):
    """Linear patch embedding with class embedding and positional table."""

    def __init__(self, width: int, image_size: int, patch_size: int, channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        n = (image_size // patch_size) ** 2
        self.proj = Linear(patch_size * patch_size * channels, width, rng, std=0.02, dtype=dtype)
        self.class_embedding = Parameter(rng.normal(0.0, 0.02, size=(width,)), dtype=dtype)
        self.positional = Parameter(rng.normal(0.0, 0.02, size=(n + 1, width)), dtype=dtype)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C) in row-major patch order."""
    image = np.asarray(image)
    *lead, H, W, C = image.shape
    p = patch_size
    if H % p or W % p:
        raise ArgumentError(f"image {H}x{W} not divisible by patch size {p}")
    x = image.reshape(*lead, H // p, p, W // p, p, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def tokenize_image(image: np.ndarray, tokenizer: ImageTokenizer) -> TokenSequence:
    """(..., H, W, C) image -> ``[CLS | N patch tokens]``, N = HW / P^2."""
    image = np.asarray(image)
    H, W, C = image.shape[-3:]
    flat = patchify(image, tokenizer.patch_size)
    if C != tokenizer.channels or H != tokenizer.image_size or W != tokenizer.image_size:
        raise ArgumentError(
            f"image {H}x{W}x{C} does not match tokenizer {tokenizer.image_size}x"
            f"{tokenizer.image_size}x{tokenizer.channels}")
    content = tokenizer.proj(Tensor(flat.astype(tokenizer.proj.weight.dtype)))
    lead = content.shape[:-2]
    D = content.shape[-1]
    table = T.broadcast_to(tokenizer.positional, lead + tokenizer.positional.shape)
    return assemble(tokenizer.class_embedding,
                    Tensor(np.zeros((0, D), dtype=content.dtype)),
                    content, table[..., 1:, :], prefix_pos=table[..., :1, :])
