"""Command-line entry point: ``epcl <subcommand> [--key value ...]``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, synthetic
from .backbone import TransformerConfig, synthetic_backbone
from .errors import ConfigError, DataError, EPCLError, NumericalError
from .formats import load_dataset, read_config
from .heads import load_text_bank
from .models import (
    ModelConfig,
    apply_container,
    backbone_container,
    build_model,
    load_backbone,
    model_container,
)
from .training import TrainConfig, evaluate, sample_16shot, sample_kway_nshot, train
from .weights import load_weights, save_weights

log = logging.getLogger("epcl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
COMMANDS = ("train", "eval", "fewshot", "align", "export-embeddings", "inspect-weights", "gen-synthetic")


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _str_tuple(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(" ", "").split(",") if x)


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Opt:
    type: object
    default: object
    help: str


# key -> option; every key is accepted by every subcommand and in config files
OPTIONS: dict[str, Opt] = {
    "data": Opt(str, None, "dataset manifest (or directory containing manifest.txt)"),
    "out": Opt(str, None, "output directory"),
    "seed": Opt(int, 0, "run seed"),
    "threads": Opt(int, 1, "BLAS threads (1 = deterministic single-threaded mode)"),
    "task": Opt(str, "classify", "classify or segment"),
    "weights": Opt(str, None, "EPCLWGT1 backbone weights; random synthetic backbone if absent"),
    "model": Opt(str, None, "EPCLWGT1 file of a trained model (eval/align/export)"),
    "backbone_seed": Opt(int, 0, "seed of the synthetic backbone"),
    "policy": Opt(str, "frozen-backbone", "frozen-backbone, full-finetune or all-frozen"),
    "layers": Opt(int, 4, "transformer depth"),
    "width": Opt(int, 128, "transformer width"),
    "heads": Opt(int, 4, "attention heads"),
    "mlp_ratio": Opt(int, 4, "MLP expansion"),
    "dropout": Opt(float, 0.3, "dropout before the backbone"),
    "activation": Opt(str, "gelu", "gelu or quick_gelu"),
    "image_size": Opt(int, 32, "image side for the image tokenizer"),
    "patch_size": Opt(int, 8, "image patch side"),
    "patches": Opt(int, 32, "point patches M"),
    "neighbors": Opt(int, 16, "points per patch K"),
    "task_tokens": Opt(int, 1, "task token count G"),
    "head_hidden": Opt(int, 256, "classification head width"),
    "head_dropout": Opt(float, 0.2, "dropout in the first two head layers"),
    "seg_points": Opt(int, 1024, "points per segmentation cloud"),
    "seg_stages": Opt(_int_tuple, None, "comma-separated stage point counts (default: halving)"),
    "seg_widths": Opt(_int_tuple, (64, 128), "widths of the first two down stages"),
    "seg_neighbors": Opt(int, 16, "neighbours per segmentation group"),
    "epochs": Opt(int, 20, "training epochs"),
    "batch_size": Opt(int, 32, "minibatch size"),
    "lr": Opt(float, 3e-4, "AdamW learning rate"),
    "weight_decay": Opt(float, 0.04, "AdamW decoupled weight decay"),
    "schedule": Opt(str, "none", "none or cosine"),
    "target": Opt(float, None, "stop once the held-out metric reaches this value"),
    "text_bank": Opt(str, None, "EPCL-TEXTBANK file enabling the contrastive term"),
    "contrastive_weight": Opt(float, 1.0, "weight of the contrastive term (with a text bank)"),
    "temperature": Opt(float, 0.07, "contrastive temperature"),
    "way": Opt(int, 5, "few-shot classes"),
    "shot": Opt(int, 10, "few-shot samples per class"),
    "protocol": Opt(str, "kway", "kway or 16shot"),
    "estimator": Opt(str, "pearson", "pearson or cosine"),
    "pool": Opt(str, None, "global feature: mean (of point tokens) or cls"),
    "per_category": Opt(int, 10, "samples per category for alignment"),
    "layer": Opt(int, -1, "layer to export (-1 = final LayerNorm output)"),
    "classes": Opt(int, 4, "synthetic classes"),
    "per_class": Opt(int, 100, "synthetic samples per class"),
    "points": Opt(int, 512, "points per synthetic cloud"),
    "families": Opt(_str_tuple, None, "comma-separated shape families"),
    "images": Opt(_bool, False, "also render a raster per synthetic cloud"),
    "test_fraction": Opt(float, 0.2, "synthetic test split fraction"),
    "verbose": Opt(_bool, False, "log progress to stderr"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epcl", description="Point-cloud learning on a frozen image-pretrained transformer.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd, help=f"{cmd} job")
        sp.error = p.error  # type: ignore[method-assign]
        sp.add_argument("--config", default=None, help="key = value config file")
        if cmd == "inspect-weights":
            sp.add_argument("path", help="EPCLWGT1 file")
        for key, opt in OPTIONS.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; convert types."""
    raw: dict[str, object] = {}
    if args.config:
        file_cfg = read_config(args.config)
        unknown = set(file_cfg) - set(OPTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update(file_cfg)
    for key in OPTIONS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    out = {}
    for key, opt in OPTIONS.items():
        if key in raw:
            try:
                out[key] = opt.type(raw[key]) if isinstance(raw[key], str) else raw[key]
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
        else:
            out[key] = opt.default
    return out


# ------------------------------------------------------------------ builders

def _backbone_cfg(c: dict) -> TransformerConfig:
    return TransformerConfig(layers=c["layers"], width=c["width"], heads=c["heads"], mlp_ratio=c["mlp_ratio"],
                             dropout=c["dropout"], activation=c["activation"], image_size=c["image_size"],
                             patch_size=c["patch_size"])


def _model_cfg(c: dict, num_classes: int, backbone_cfg: TransformerConfig, text_width: int = 0) -> ModelConfig:
    if c["task"] not in ("classify", "segment"):
        raise ConfigError(f"unknown task {c['task']!r}")
    return ModelConfig(task=c["task"], num_classes=num_classes, patches=c["patches"], neighbors=c["neighbors"],
                       task_tokens=c["task_tokens"], head_hidden=c["head_hidden"], head_dropout=c["head_dropout"],
                       text_width=text_width, seg_points=c["seg_points"], seg_stage_points=c["seg_stages"],
                       seg_widths=tuple(c["seg_widths"]), seg_neighbors=c["seg_neighbors"], backbone=backbone_cfg)


MODEL_META_KEYS = ("task", "num_classes", "patches", "neighbors", "task_tokens", "head_hidden", "head_dropout",
                   "text_width", "seg_points", "seg_stage_points", "seg_widths", "seg_neighbors")


def _model_meta(cfg: ModelConfig) -> dict[str, str]:
    meta = {}
    for k in MODEL_META_KEYS:
        v = getattr(cfg, k)
        meta["model." + k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else ("" if v is None else str(v))
    return meta


def _model_cfg_from_meta(meta: dict[str, str], backbone_cfg: TransformerConfig) -> ModelConfig:
    cfg = ModelConfig(backbone=backbone_cfg)
    for k in MODEL_META_KEYS:
        raw = meta.get("model." + k)
        if raw is None:
            raise ConfigError(f"model file lacks metadata key model.{k}")
        cur = getattr(ModelConfig(), k)
        if k in ("seg_stage_points", "seg_widths"):
            setattr(cfg, k, _int_tuple(raw) or None)
        elif isinstance(cur, str):
            setattr(cfg, k, raw)
        elif isinstance(cur, float):
            setattr(cfg, k, float(raw))
        else:
            setattr(cfg, k, int(raw))
    return cfg


def _backbone(c: dict):
    if c["weights"]:
        container = load_weights(c["weights"])
        return load_backbone(container, dropout=c["dropout"]), container.metadata.get("source", c["weights"])
    return synthetic_backbone(_backbone_cfg(c), c["backbone_seed"]), f"synthetic:{c['backbone_seed']}"


def _load_trained(path: str, dropout: float | None = None):
    container = load_weights(path)
    backbone = load_backbone(container, dropout)
    cfg = _model_cfg_from_meta(container.metadata, backbone.cfg)
    model = build_model(cfg, backbone, 0)
    apply_container(model, container)
    return model


def _need(c: dict, *keys: str) -> None:
    missing = [k for k in keys if not c.get(k)]
    if missing:
        raise ConfigError("missing required settings: " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out(c: dict) -> Path:
    _need(c, "out")
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_cfg(c: dict, contrastive: bool) -> TrainConfig:
    if c["schedule"] not in ("none", "cosine"):
        raise ConfigError(f"unknown schedule {c['schedule']!r}")
    return TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], weight_decay=c["weight_decay"],
                       schedule=c["schedule"], contrastive_weight=c["contrastive_weight"] if contrastive else 0.0,
                       temperature=c["temperature"], seed=c["seed"], target=c["target"])


def _write_summary(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def _check_data(c: dict, ds) -> None:
    if c["task"] == "segment" and ds.point_labels is None:
        raise DataError("segmentation needs per-point labels in every cloud file")


# ---------------------------------------------------------------------- jobs

def cmd_train(c: dict) -> int:
    _need(c, "data")
    out = _out(c)
    ds = load_dataset(c["data"])
    _check_data(c, ds)
    bank = load_text_bank(c["text_bank"]) if c["text_bank"] else None
    if bank is not None and bank.num_classes != len(ds.class_names):
        raise ConfigError(f"text bank has {bank.num_classes} classes, dataset {len(ds.class_names)}")
    if c["task"] == "segment":
        num_classes = int(max(int(p.max()) for p in ds.point_labels)) + 1
    else:
        num_classes = len(ds.class_names)
    backbone, source = _backbone(c)
    cfg = _model_cfg(c, num_classes, backbone.cfg, bank.width if bank else 0)
    model = build_model(cfg, backbone, c["seed"], c["policy"])
    tr, te = ds.subset(ds.indices("train")), ds.subset(ds.indices("test"))
    report = train(model, tr, _train_cfg(c, bank is not None), te, bank)
    (out / "metrics.csv").write_text(report.to_csv())
    container = model_container(model, source)
    container.metadata.update(_model_meta(cfg))
    save_weights(container, out / "model.epcl")
    metric = "mIoU" if c["task"] == "segment" else "accuracy"
    changed = sorted(k for k, v in report.backbone_hashes[-1].items() if v != report.backbone_hashes[0][k])
    _write_summary(out / "summary.txt", {
        "task": c["task"], "policy": c["policy"], "train_samples": len(tr), "test_samples": len(te),
        "epochs_run": max((e for e, *_ in report.records), default=0), f"test_{metric}": report.last("test", metric),
        "backbone_tensors_changed": len(changed),
    })
    print(f"{metric} {report.last('test', metric):.4f}")
    return EXIT_OK


def cmd_eval(c: dict) -> int:
    _need(c, "data", "model")
    out = _out(c)
    ds = load_dataset(c["data"])
    model = _load_trained(c["model"])
    c["task"] = model.cfg.task
    _check_data(c, ds)
    te = ds.subset(ds.indices("test"))
    metrics = evaluate(model, te)
    _write_summary(out / "metrics.txt", {k: repr(v) for k, v in metrics.items()})
    for k, v in metrics.items():
        print(f"{k} {v:.4f}")
    return EXIT_OK


def cmd_fewshot(c: dict) -> int:
    _need(c, "data")
    out = _out(c)
    ds = load_dataset(c["data"])
    if c["protocol"] == "kway":
        ep = sample_kway_nshot(ds.labels, c["way"], c["shot"], c["seed"], ds.split)
    elif c["protocol"] == "16shot":
        ep = sample_16shot(ds.labels, c["seed"], ds.split, shot=16)
    else:
        raise ConfigError(f"unknown few-shot protocol {c['protocol']!r}")
    remap = {cls: i for i, cls in enumerate(ep.classes)}
    tr, te = ds.subset(ep.train_indices), ds.subset(ep.test_indices)
    tr.labels = np.array([remap[int(v)] for v in tr.labels])
    te.labels = np.array([remap[int(v)] for v in te.labels])
    tr.class_names = te.class_names = [ds.class_names[k] for k in ep.classes]
    backbone, _ = _backbone(c)
    c["task"] = "classify"
    model = build_model(_model_cfg(c, len(ep.classes), backbone.cfg), backbone, c["seed"], c["policy"])
    report = train(model, tr, _train_cfg(c, False), te)
    (out / "metrics.csv").write_text(report.to_csv())
    lines = [f"protocol {c['protocol']}", f"way {ep.way}", f"shot {ep.shot}", f"seed {ep.seed}",
             "classes " + " ".join(tr.class_names),
             "train " + " ".join(str(i) for i in ep.train_indices),
             "test " + " ".join(str(i) for i in ep.test_indices)]
    (out / "episode.txt").write_text("\n".join(lines) + "\n")
    acc = report.last("test", "accuracy")
    _write_summary(out / "summary.txt", {"protocol": c["protocol"], "way": ep.way, "shot": ep.shot,
                                         "train_samples": len(ep.train_indices),
                                         "test_samples": len(ep.test_indices), "test_accuracy": acc})
    print(f"train {len(ep.train_indices)} test {len(ep.test_indices)} accuracy {acc:.4f}")
    return EXIT_OK


def _analysis_model(c: dict, num_classes: int):
    if c["model"]:
        return _load_trained(c["model"])
    backbone, _ = _backbone(c)
    c["task"] = "classify"
    return build_model(_model_cfg(c, num_classes, backbone.cfg), backbone, c["seed"], c["policy"])


def cmd_align(c: dict) -> int:
    _need(c, "data")
    out = _out(c)
    ds, images = load_dataset(c["data"], with_images=True)
    model = _analysis_model(c, len(ds.class_names))
    clouds_by, images_by = {}, {}
    for i, lab in enumerate(ds.labels):
        name = ds.class_names[int(lab)]
        if len(clouds_by.setdefault(name, [])) < c["per_category"]:
            clouds_by[name].append(ds.clouds[i])
            images_by.setdefault(name, []).append(images[i])
    curve = analysis.model_alignment_curve(model, clouds_by, images_by, c["pool"] or "mean", c["estimator"])
    (out / "curve.csv").write_text(curve.to_text())
    for m in curve.matrices:
        (out / f"matrix_layer{m.layer}.csv").write_text(analysis.format_matrix(m))
    print(" ".join(f"{v:.4f}" for v in curve.values))
    return EXIT_OK


def cmd_export(c: dict) -> int:
    _need(c, "data")
    out = _out(c)
    ds = load_dataset(c["data"])
    model = _analysis_model(c, len(ds.class_names))
    n = analysis.export_embeddings(model, ds, out / "embeddings.csv", c["layer"], c["pool"] or "cls")
    print(f"{n} rows")
    return EXIT_OK


def cmd_inspect(c: dict, path: str) -> int:
    container = load_weights(path)
    lines = [f"{'name':<48} {'shape':<16} frozen"]
    for name, arr in container.tensors.items():
        lines.append(f"{name:<48} {'x'.join(map(str, arr.shape)) or 'scalar':<16} {int(container.frozen[name])}")
    for k, v in sorted(container.metadata.items()):
        lines.append(f"# {k} = {v}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if c["out"]:
        _out(c).joinpath("tensors.txt").write_text(text)
    return EXIT_OK


def cmd_gen(c: dict) -> int:
    out = _out(c)
    synthetic.gen_synthetic(out, c["classes"], c["per_class"], c["points"], c["seed"], c["test_fraction"],
                            c["families"], c["images"])
    if c["weights"]:
        bb = synthetic_backbone(_backbone_cfg(c), c["backbone_seed"])
        save_weights(backbone_container(bb, f"synthetic:{c['backbone_seed']}"), c["weights"])
    print(f"wrote {c['classes'] if not c['families'] else len(c['families'])} classes to {out}")
    return EXIT_OK


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise ConfigError("missing subcommand")
    c = resolve(args)
    logging.basicConfig(level=logging.INFO if c["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    jobs = {"train": cmd_train, "eval": cmd_eval, "fewshot": cmd_fewshot, "align": cmd_align,
            "export-embeddings": cmd_export, "gen-synthetic": cmd_gen}
    with threadpool_limits(c["threads"]):
        if args.command == "inspect-weights":
            return cmd_inspect(c, args.path)
        return jobs[args.command](c)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"epcl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"epcl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"epcl: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"epcl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EPCLError as exc:
        print(f"epcl: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
