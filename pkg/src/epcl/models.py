"""Full models: trainable tokenizer/task token/head around a shared backbone."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from . import tensor as T
from .backbone import Transformer, TransformerConfig, config_metadata, freeze_partition
from .heads import (
    ClassificationHead,
    SegmentationGeometry,
    SegmentationPipeline,
    classify,
    cls_feature,
    segment,
)
from .errors import ConfigError, FormatError
from .nn import Module
from .tensor import Tensor
from .tokenization import PointTokenizer, TaskToken, TokenSequence, assemble
from .weights import WeightContainer, from_parameters


@dataclass
class ModelConfig:
    task: str = "classify"
    num_classes: int = 4
    patches: int = 64
    neighbors: int = 32
    task_tokens: int = 1
    head_hidden: int = 256
    head_dropout: float = 0.2
    text_width: int = 0
    seg_points: int = 1024
    seg_stage_points: tuple[int, ...] | None = None
    seg_widths: tuple[int, int] = (64, 128)
    seg_neighbors: int = 16
    backbone: TransformerConfig = field(default_factory=TransformerConfig)


@dataclass
class CloudBatch:
    """Precomputed tokenizer geometry for a stack of clouds."""

    patches: np.ndarray  # (B, M, K, 3) center-relative
    centers: np.ndarray  # (B, M, 3)

    def __len__(self) -> int:
        return len(self.patches)

    def take(self, idx) -> CloudBatch:
        return CloudBatch(self.patches[idx], self.centers[idx])


def prepare_clouds(clouds, M: int, K: int, start: int = 0, dtype=np.float32) -> CloudBatch:
    patches, centers = [], []
    for c in clouds:
        pts = geometry._coords(c)
        ps = geometry.build_patches(pts, M, K, start)
        patches.append(geometry.patch_coordinates(pts, ps))
        centers.append(ps.centers)
    if not patches:
        return CloudBatch(np.zeros((0, M, K, 3), dtype), np.zeros((0, M, 3), dtype))
    return CloudBatch(np.stack(patches).astype(dtype), np.stack(centers).astype(dtype))


class PointClassifier(Module):
    def __init__(self, cfg: ModelConfig, backbone: Transformer, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        D = backbone.cfg.width
        self.cfg = cfg
        self.tokenizer = PointTokenizer(D, rng, dtype)
        self.task_token = TaskToken(cfg.task_tokens, D, rng, dtype)
        self.backbone = backbone
        self.head = ClassificationHead(D, cfg.num_classes, rng, cfg.head_hidden, cfg.head_dropout,
                                       cfg.text_width or None, dtype)

    def tokens(self, batch: CloudBatch) -> TokenSequence:
        content = self.tokenizer.encode_patches(batch.patches)
        pos = self.tokenizer.positional(batch.centers)
        return assemble(self.tokenizer.cls_token, self.task_token(), content, pos)

    def forward(self, batch: CloudBatch, rng: np.random.Generator | None = None):
        """Returns (logits, CLS feature, backbone output)."""
        seq = self.tokens(batch)
        out = self.backbone(seq, rng)
        return classify(out.final, self.head, rng), cls_feature(out.final), out

    __call__ = forward


class PointSegmenter(Module):
    def __init__(self, cfg: ModelConfig, backbone: Transformer, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        D = backbone.cfg.width
        self.cfg = cfg
        self.pipeline = SegmentationPipeline(D, cfg.num_classes, rng, cfg.seg_widths, cfg.seg_points,
                                             cfg.seg_stage_points, cfg.seg_neighbors, dtype)
        self.task_token = TaskToken(cfg.task_tokens, D, rng, dtype)
        self.backbone = backbone

    def forward(self, geo: SegmentationGeometry, rng: np.random.Generator | None = None) -> Tensor:
        return segment(geo, self.pipeline, self.backbone, self.task_token, rng)

    __call__ = forward


def build_model(cfg: ModelConfig, backbone: Transformer, seed: int = 0, policy: str = "frozen-backbone"):
    cls = PointSegmenter if cfg.task == "segment" else PointClassifier
    model = cls(cfg, backbone, seed)
    freeze_partition(model.state_dict(), policy)
    return model


def model_container(model: Module, source: str = "") -> WeightContainer:
    meta = config_metadata(model.backbone.cfg)
    if source:
        meta["source"] = source
    return from_parameters(model.named_parameters(), meta)


def backbone_container(backbone: Transformer, source: str = "synthetic") -> WeightContainer:
    """Backbone-only archive, every tensor flagged frozen."""
    meta = config_metadata(backbone.cfg)
    meta["source"] = source
    c = WeightContainer(metadata=meta)
    for name, p in backbone.named_parameters("backbone."):
        c.add(name, p.data, True)
    return c


def load_backbone(container: WeightContainer, dropout: float | None = None) -> Transformer:
    kw = {} if dropout is None else {"dropout": dropout}
    cfg = container.backbone_config(**kw)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise FormatError(f"weight metadata describes an invalid backbone: {exc}") from exc
    bb = Transformer(cfg, np.random.default_rng(0))
    arrays = {k[len("backbone."):]: v for k, v in container.tensors.items() if k.startswith("backbone.")}
    try:
        bb.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise FormatError(str(exc)) from exc
    return bb


def apply_container(model: Module, container: WeightContainer, strict: bool = False) -> None:
    """Load every tensor the container holds and restore its frozen flag."""
    try:
        model.load_state_dict(container.tensors, strict=strict)
    except (KeyError, ValueError) as exc:
        raise FormatError(str(exc)) from exc
    for name, p in model.named_parameters():
        if name in container.frozen:
            p.requires_grad = not container.frozen[name]


def no_grad_forward(model, batch, rng=None):
    with T.no_grad():
        return model(batch, rng)
