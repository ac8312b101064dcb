"""Pre-LN transformer backbone and its frozen/trainable partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor
from .tokenization import ImageTokenizer, TokenSequence

BACKBONE_PREFIX = "backbone."
POLICIES = ("frozen-backbone", "full-finetune", "all-frozen")


@dataclass
class TransformerConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.3
    activation: str = "gelu"
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigError(f"layer count must be >= 0, got {self.layers}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.activation not in ("gelu", "quick_gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def full_scale(cls) -> TransformerConfig:
        return cls(layers=12, width=768, heads=12, image_size=224, patch_size=16)


@dataclass
class BackboneOutput:
    layers: list[Tensor]
    final: Tensor


class Attention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.q = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.k = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.v = Linear(width, width, rng, std=0.02, dtype=dtype)
        self.out = Linear(width, width, rng, std=0.02, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.multi_head_self_attention(
            x, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.out.weight, self.out.bias, self.heads)


class Block(Module):
    """x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        hidden = cfg.width * cfg.mlp_ratio
        self.ln1 = LayerNorm(cfg.width, dtype=dtype)
        self.attn = Attention(cfg.width, cfg.heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.width, dtype=dtype)
        self.fc1 = Linear(cfg.width, hidden, rng, std=0.02, dtype=dtype)
        self.fc2 = Linear(hidden, cfg.width, rng, std=0.02, dtype=dtype)
        self._act = T.gelu if cfg.activation == "gelu" else T.quick_gelu

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(self._act(self.fc1(self.ln2(x))))


class Transformer(Module):
    """Shared backbone: L pre-LN blocks, a final LayerNorm, and the image stem.

    The image stem (patch projection, class embedding, positional table) is
    part of the pretrained visual tower and lives here so that it is
    partitioned together with the blocks.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.image_tokenizer = ImageTokenizer(cfg.width, cfg.image_size, cfg.patch_size, cfg.channels, rng, dtype)
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.ln_final = LayerNorm(cfg.width, dtype=dtype)

    def forward(self, seq: TokenSequence | Tensor, rng: np.random.Generator | None = None) -> BackboneOutput:
        """Run every block.

        ``layers[0]`` is the input embedding (after dropout in training mode),
        ``layers[l]`` the output of block ``l``; ``final`` is ``LN(layers[-1])``.
        """
        x = seq.embeddings() if isinstance(seq, TokenSequence) else seq
        if x.shape[-1] != self.cfg.width:
            raise DimensionError(f"sequence width {x.shape[-1]} does not match backbone width {self.cfg.width}")
        x = T.dropout(x, self.cfg.dropout, self.training, rng)
        outs = [x]
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return BackboneOutput(outs, self.ln_final(x))

    __call__ = forward


def backbone_names(names) -> list[str]:
    return [n for n in names if n.startswith(BACKBONE_PREFIX)]


def freeze_partition(params: dict[str, Tensor], policy: str = "frozen-backbone") -> dict[str, Tensor]:
    """Set ``requires_grad`` flags on a name -> parameter mapping in place."""
    if policy not in POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r}; expected one of {POLICIES}")
    for name, p in params.items():
        if policy == "all-frozen":
            p.requires_grad = False
        elif policy == "full-finetune":
            p.requires_grad = True
        else:
            p.requires_grad = not name.startswith(BACKBONE_PREFIX)
        if not p.requires_grad:
            p.grad = None
    return params


def expected_backbone_shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every backbone tensor (names without the ``backbone.`` prefix)."""
    D, H = cfg.width, cfg.width * cfg.mlp_ratio
    n = (cfg.image_size // cfg.patch_size) ** 2
    shapes: dict[str, tuple[int, ...]] = {
        "image_tokenizer.proj.weight": (cfg.patch_size ** 2 * cfg.channels, D),
        "image_tokenizer.proj.bias": (D,),
        "image_tokenizer.class_embedding": (D,),
        "image_tokenizer.positional": (n + 1, D),
        "ln_final.weight": (D,),
        "ln_final.bias": (D,),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        for ln in ("ln1", "ln2"):
            shapes[b + ln + ".weight"] = (D,)
            shapes[b + ln + ".bias"] = (D,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{b}attn.{proj}.weight"] = (D, D)
            shapes[f"{b}attn.{proj}.bias"] = (D,)
        shapes[b + "fc1.weight"] = (D, H)
        shapes[b + "fc1.bias"] = (H,)
        shapes[b + "fc2.weight"] = (H, D)
        shapes[b + "fc2.bias"] = (D,)
    return shapes


def config_metadata(cfg: TransformerConfig) -> dict[str, str]:
    return {
        "width": str(cfg.width), "layers": str(cfg.layers), "heads": str(cfg.heads),
        "mlp_ratio": str(cfg.mlp_ratio), "activation": cfg.activation,
        "image_size": str(cfg.image_size), "patch_size": str(cfg.patch_size),
        "channels": str(cfg.channels),
    }


def config_from_metadata(meta: dict[str, str], **overrides) -> TransformerConfig:
    cfg = TransformerConfig()
    for key in ("width", "layers", "heads", "mlp_ratio", "image_size", "patch_size", "channels"):
        if key in meta:
            setattr(cfg, key, int(meta[key]))
    if "activation" in meta:
        cfg.activation = meta["activation"]
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def synthetic_backbone(cfg: TransformerConfig, seed: int = 0, dtype=np.float32) -> Transformer:
    """Randomly initialised backbone standing in for converted pretrained weights."""
    return Transformer(cfg, np.random.default_rng(seed), dtype)
