"""Command-line interface: gen-data, train, eval, params, explain.

Settings are layered: built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .architecture import (
    BACKBONES,
    REDUCTIONS,
    VARIANTS,
    Model,
    ModelSpec,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .data import Dataset, Volume, generate_synthetic, write_dataset, write_volume
from .errors import FormatError
from .interpret import UnsupportedReductionError, export_attention, extract_attention, hirescam
from .training import TrainConfig, TrainingDivergedError, aggregate, evaluate, train, write_report_csv

logger = logging.getLogger("slice25d")


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return tuple(int(t) for t in str(text).replace("x", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


MODEL_DEFAULTS = {
    "variant": "slice2p5d",
    "backbone": "tiny_cnn",
    "reduction": "attention_pool",
    "n_heads": 8,
    "n_classes": 2,
    "in_channels": 1,
    "widths": (8, 16, 32),
}

DEFAULTS = {
    "gen-data": {"out": "data", "shape": (16,), "per_class": 200, "seed": 0, "sigma": 0.1,
                 "amplitude": 0.8, "blob_size": 4, "kind": "cube", "name": "planted"},
    "train": dict(MODEL_DEFAULTS, manifest=None, out="runs", epochs=50, lr=2e-4, batch_size=64,
                  freeze_epochs=2, seeds=(0, 1, 2, 3, 4)),
    "eval": {"checkpoint": None, "manifest": None, "split": "test", "batch_size": 64},
    "params": dict(MODEL_DEFAULTS, backbone="resnet18_shape"),
    "explain": {"checkpoint": None, "manifest": None, "out": "explain/attention", "split": "test",
                "index": 0, "hirescam": False, "layer": None, "target_class": 1, "clamp": False},
}

TYPES = {"shape": _ints, "widths": _ints, "seeds": _ints}


def _add(parser, cmd, name, help_text, **kwargs):
    dest = name.lstrip("-").replace("-", "_")
    default = DEFAULTS[cmd][dest]
    shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
    kwargs.setdefault("type", TYPES.get(dest, type(default) if default is not None and not isinstance(default, bool) else str))
    if isinstance(default, bool):
        kwargs.pop("type")
        kwargs["action"] = "store_true"
    parser.add_argument(name, dest=dest, default=argparse.SUPPRESS,
                        help=f"{help_text} (default: {shown})", **kwargs)


def _model_flags(p, cmd):
    _add(p, cmd, "--variant", "model family", choices=VARIANTS)
    _add(p, cmd, "--backbone", "feature extractor", choices=BACKBONES)
    _add(p, cmd, "--reduction", "slice reduction head (slice2p5d only)", choices=REDUCTIONS)
    _add(p, cmd, "--n-heads", "attention heads")
    _add(p, cmd, "--n-classes", "number of classes")
    _add(p, cmd, "--in-channels", "input channels")
    _add(p, cmd, "--widths", "tiny_cnn stage widths")


def build_parser():
    parser = argparse.ArgumentParser(prog="slice25d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic planted-signal dataset")
    _add(p, "gen-data", "--out", "output directory")
    _add(p, "gen-data", "--shape", "volume extent, one value or d,h,w")
    _add(p, "gen-data", "--per-class", "volumes per class")
    _add(p, "gen-data", "--seed", "generator seed")
    _add(p, "gen-data", "--sigma", "noise standard deviation")
    _add(p, "gen-data", "--amplitude", "blob amplitude")
    _add(p, "gen-data", "--blob-size", "blob side length in voxels")
    _add(p, "gen-data", "--kind", "blob shape", choices=("cube", "ball"))
    _add(p, "gen-data", "--name", "dataset name")

    p = sub.add_parser("train", help="train one model per seed")
    _add(p, "train", "--manifest", "dataset manifest.json")
    _add(p, "train", "--out", "output directory")
    _model_flags(p, "train")
    _add(p, "train", "--epochs", "training epochs")
    _add(p, "train", "--lr", "NAdam learning rate")
    _add(p, "train", "--batch-size", "batch size")
    _add(p, "train", "--freeze-epochs", "epochs with the backbone frozen")
    _add(p, "train", "--seeds", "comma-separated seeds")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add(p, "eval", "--checkpoint", "SPM1 checkpoint")
    _add(p, "eval", "--manifest", "dataset manifest.json")
    _add(p, "eval", "--split", "split to evaluate", choices=("train", "val", "test"))
    _add(p, "eval", "--batch-size", "batch size")

    p = sub.add_parser("params", help="print the trainable parameter count")
    _model_flags(p, "params")

    p = sub.add_parser("explain", help="export attention maps (or HiResCam for volumetric models)")
    _add(p, "explain", "--checkpoint", "SPM1 checkpoint")
    _add(p, "explain", "--manifest", "dataset manifest.json")
    _add(p, "explain", "--out", "output path prefix")
    _add(p, "explain", "--split", "split to draw the volume from", choices=("train", "val", "test"))
    _add(p, "explain", "--index", "volume index within the split")
    _add(p, "explain", "--hirescam", "compute HiResCam (conv3d/acs checkpoints)")
    _add(p, "explain", "--layer", "HiResCam layer (default: last stage)")
    _add(p, "explain", "--target-class", "HiResCam target class")
    _add(p, "explain", "--clamp", "apply ReLU to the HiResCam map")

    for action in sub.choices.values():
        action.add_argument("--config", default=argparse.SUPPRESS,
                            help="JSON file with settings; flags override it")
    return parser


def resolve(command, ns):
    """Merge defaults, the optional config file and explicit flags."""
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(settings)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        for k, v in cfg.items():
            if isinstance(settings[k], tuple):
                v = tuple(v) if isinstance(v, (list, tuple)) else _ints(v)
            settings[k] = v
    settings.update(flags)
    return settings


def _model_spec(s):
    return ModelSpec(variant=s["variant"], backbone=s["backbone"], reduction=s["reduction"],
                     n_heads=int(s["n_heads"]), n_classes=int(s["n_classes"]),
                     in_channels=int(s["in_channels"]),
                     widths=(64, 128, 256, 512) if s["backbone"] == "resnet18_shape" else s["widths"])


def _require(s, *keys):
    for k in keys:
        if s.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def cmd_gen_data(s):
    shape = s["shape"]
    if len(shape) not in (1, 3):
        raise UsageError("--shape takes one value or three (d,h,w)")
    shape = shape * 3 if len(shape) == 1 else shape
    if s["per_class"] < 1:
        raise UsageError("--per-class must be >= 1")
    try:
        manifest, volumes = generate_synthetic(
            s["per_class"], shape, s["kind"], float(s["sigma"]), int(s["seed"]),
            amplitude=float(s["amplitude"]), blob_size=int(s["blob_size"]), name=s["name"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(write_dataset(manifest, volumes, s["out"]))
    return 0


def _load_dataset(path):
    if not path or not os.path.exists(path):
        raise UsageError(f"manifest not found: {path}")
    try:
        return Dataset.from_manifest(path)
    except (FormatError, ValueError, KeyError, OSError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from None


def cmd_train(s):
    _require(s, "manifest")
    try:
        spec = _model_spec(s)
        config = TrainConfig(epochs=int(s["epochs"]), learning_rate=float(s["lr"]),
                             batch_size=int(s["batch_size"]), freeze_epochs=int(s["freeze_epochs"]),
                             seeds=s["seeds"])
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    dataset = _load_dataset(s["manifest"])
    if dataset.n_classes != spec.n_classes:
        raise UsageError(f"dataset has {dataset.n_classes} classes, model expects {spec.n_classes}")
    os.makedirs(s["out"], exist_ok=True)
    reports = []
    for seed in config.seeds:
        model = Model(spec, seed=seed)

        def progress(rep):
            print(f"seed {seed} epoch {len(rep.epoch_seconds) - 1}: "
                  f"{rep.epoch_seconds[-1]:.2f}s, val acc {rep.records[-1].acc:.3f}")

        try:
            rep = train(model, dataset, config, seed, on_epoch=progress)
        except TrainingDivergedError as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return 1
        reports.append(rep)
        write_report_csv(rep.rows(), os.path.join(s["out"], f"report_seed{seed}.csv"))
        save_checkpoint(model, os.path.join(s["out"], f"model_seed{seed}.spm"))
        secs = np.array(rep.epoch_seconds)
        print(f"seed {seed}: test acc {rep.test.acc:.4f} auroc {rep.test.auroc:.4f}; "
              f"epoch time {secs.mean():.2f} +- {secs.std():.2f}s")
    agg = aggregate(reports)
    agg.to_csv(os.path.join(s["out"], "report.csv"))
    summary = {
        "model": spec.to_dict(),
        "train": {"epochs": config.epochs, "learning_rate": config.learning_rate,
                  "batch_size": config.batch_size, "freeze_epochs": config.freeze_epochs,
                  "seeds": list(config.seeds)},
        "selection": "last_epoch",
        "test": {str(r.seed): {"loss": r.test.loss, "acc": r.test.acc, "auroc": r.test.auroc} for r in reports},
        "mean": agg.mean,
        "std": agg.std,
    }
    with open(os.path.join(s["out"], "aggregate.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"mean test acc {agg.mean['acc']:.4f} auroc {agg.mean['auroc']:.4f}")
    return 0


def _load_model(path):
    if not path or not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (FormatError, OSError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(s):
    _require(s, "checkpoint", "manifest")
    model = _load_model(s["checkpoint"])
    dataset = _load_dataset(s["manifest"])
    if dataset.size(s["split"]) == 0:
        raise UsageError(f"split {s['split']!r} is empty")
    loss, acc, auc, _ = evaluate(model, dataset, s["split"], int(s["batch_size"]))
    print(json.dumps({"split": s["split"], "loss": loss, "acc": acc, "auroc": auc}))
    return 0


def cmd_params(s):
    try:
        spec = _model_spec(s)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    n = count_parameters(Model(spec))
    print(f"{n} ({n / 1e6:.2f} M) trainable parameters")
    return 0


def cmd_explain(s):
    _require(s, "checkpoint", "manifest")
    model = _load_model(s["checkpoint"])
    dataset = _load_dataset(s["manifest"])
    part = dataset.splits[s["split"]]
    index = int(s["index"])
    if not 0 <= index < len(part["y"]):
        raise UsageError(f"--index {index} outside split {s['split']!r} of size {len(part['y'])}")
    x = part["x"][index]
    prefix = s["out"]
    if s["hirescam"]:
        try:
            attr = hirescam(model, x, int(s["target_class"]), s["layer"], clamp=bool(s["clamp"]))
        except (UnsupportedReductionError, KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
        path = f"{prefix}_hirescam.rvf"
        write_volume(path, Volume(f"{part['ids'][index]}_hirescam_{attr.layer}",
                                  attr.upsampled[None], attr.target_class))
        print(path)
        return 0
    try:
        amap = extract_attention(model, x)
    except UnsupportedReductionError as exc:
        raise UsageError(f"{exc}; pass --hirescam for volumetric models") from None
    for path in export_attention(amap, prefix):
        print(path)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "params": cmd_params, "explain": cmd_explain}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(ns.command, ns)
        return COMMANDS[ns.command](settings)
    except UsageError as exc:
        print(f"slice25d {ns.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
