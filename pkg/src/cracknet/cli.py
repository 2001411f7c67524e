"""Command-line entry point: ``cracknet <command> [options]``.

Commands: synth, train, eval, predict, ablate, bench, report.  Run any of
them with ``-h`` for the options.  Errors are printed to stderr as
``ErrorClass: message`` and the process exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .complexity import complexity_report, config_report
from .data import (AugmentConfig, Sample, SynthConfig, foreground_fraction, load_dataset, resize,
                   split_80_20, stack_batch, synth_generate, write_dataset)
from .errors import ConfigError, CrackNetError, UsageError
from .model import ContextCrackNet, ModelConfig, predict_mask
from .rfem import export_attention_map
from .tensor import Tensor, no_grad
from .train import (HISTORY_FIELDS, TrainConfig, ablate, evaluate, format_ablation, load_checkpoint,
                    train)

log = logging.getLogger("cracknet")

SECTIONS = ("model", "train", "augment")


# -- run configuration -----------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "augment": self.augment.to_dict()}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def resolve_config(path=None, overrides: dict | None = None) -> RunConfig:
    """JSON file sections, then flag overrides given as ``{"section.key": value}``."""
    raw = _read_json(path) if path else {}
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = {s: dict(raw.get(s) or {}) for s in SECTIONS}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = key.split(".")
        merged[section][name] = value
    # one seed drives weight init, batch order, augmentation and the split
    if "seed" in merged["train"]:
        merged["model"].setdefault("seed", merged["train"]["seed"])
        merged["augment"].setdefault("seed", merged["train"]["seed"])
    aug = merged["augment"]
    unknown = set(aug) - set(AugmentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown augment config keys: {sorted(unknown)}")
    return RunConfig(ModelConfig.from_dict(merged["model"]), TrainConfig.from_dict(merged["train"]),
                     AugmentConfig(**aug))


def _overrides(args) -> dict:
    return {
        "model.use_cagm": getattr(args, "use_cagm", None),
        "model.use_rfem": getattr(args, "use_rfem", None),
        "model.num_classes": getattr(args, "num_classes", None),
        "model.height": getattr(args, "size", None),
        "model.width": getattr(args, "size", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.lr": getattr(args, "lr", None),
        "train.weight_decay": getattr(args, "weight_decay", None),
        "train.seed": getattr(args, "seed", None),
        "train.augment": getattr(args, "augment", None),
    }


def _dump(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- data helpers ----------------------------------------------------------

def load_data_dir(root, height: int, width: int) -> list[Sample]:
    """``root/images`` and ``root/masks``, resized to the model input."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise UsageError(f"{root} must contain images/ and masks/ subdirectories")
    return [resize(s, height, width) for s in load_dataset(img_dir, mask_dir)]


def _split(samples, seed: int, which: str):
    if which == "all":
        return samples
    tr, va = split_80_20(samples, seed)
    return tr if which == "train" else va


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(count=args.count, size=args.size, fg_fraction=args.fg_fraction)
    samples = synth_generate(cfg, args.seed)
    img_dir, _ = write_dataset(samples, args.out)
    info = {"synth_config": cfg.to_dict(), "seed": args.seed, "count": len(samples),
            "foreground_fraction": foreground_fraction(samples)}
    _dump(info, Path(args.out) / "synth.json")
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_history

    run = resolve_config(args.config, _overrides(args))
    log.info("resolved config: %s", json.dumps(run.to_dict(), sort_keys=True))
    samples = load_data_dir(args.data, run.model.height, run.model.width)
    tr, va = split_80_20(samples, run.train.seed)
    out = Path(args.out)
    _dump({**run.to_dict(), "data": str(args.data)}, out / "config.json")
    model = ContextCrackNet(run.model)
    result = train(model, tr, va, run.train, out, run.augment)
    plot_history(result.history, out / "curves.png")
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
               "final": result.final_metrics, "checkpoint": str(result.checkpoint),
               "history": str(out / "history.csv"), "params": model.num_parameters(),
               "config": run.to_dict()}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    tcfg = header.get("extra", {}).get("train_config", {})
    samples = load_data_dir(args.data, model.config.height, model.config.width)
    samples = _split(samples, tcfg.get("seed", 0), args.split)
    report = evaluate(model, samples, tcfg.get("batch_size", 8))
    report.config = {"model": model.config.to_dict(), "train": tcfg, "checkpoint": str(args.checkpoint),
                     "split": args.split, "samples": len(samples)}
    if args.json:
        _dump(report.to_dict(), args.json)
    print(report.to_json() if args.format == "json" else report.to_table())
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    try:
        rgb = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise UsageError(f"image {args.image} does not exist") from None
    H, W = rgb.shape[:2]
    sample = resize(Sample(rgb.transpose(2, 0, 1).copy(), np.zeros((H, W), np.int64), Path(args.image).stem),
                    cfg.height, cfg.width)
    x, _ = stack_batch([sample])
    with no_grad():
        logits = model(Tensor(x))
    labels = predict_mask(logits)[0]
    # back to the input resolution with nearest-neighbour lookup
    back = resize(Sample(np.zeros((3, cfg.height, cfg.width)), labels, sample.id), H, W).mask
    if cfg.num_classes <= 2:
        out = (back > 0).astype(np.uint8) * 255
    else:
        out = np.round(back * (255 / (cfg.num_classes - 1))).astype(np.uint8)
    Path(args.out_mask).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(args.out_mask, format="PNG")
    written = []
    maps = [m[0, 0] for m in model.attention_maps()]
    if args.out_attn:
        attn = Path(args.out_attn)
        attn.mkdir(parents=True, exist_ok=True)
        for i, psi in enumerate(maps):
            p = attn / f"{sample.id}_psi{i}.png"
            export_attention_map(psi, p)
            written.append(str(p))
    if args.figure:
        from .plotting import plot_attention_overlay
        plot_attention_overlay(sample.image, maps, args.figure)
    print(json.dumps({"mask": str(args.out_mask), "attention": written, "input_size": [H, W],
                      "foreground_pixels": int((back > 0).sum()), "config": cfg.to_dict()}, sort_keys=True))
    return 0


def write_ablation_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    run = resolve_config(args.config, _overrides(args))
    log.info("resolved config: %s", json.dumps(run.to_dict(), sort_keys=True))
    samples = load_data_dir(args.data, run.model.height, run.model.width)
    tr, va = split_80_20(samples, run.train.seed)
    out = Path(args.out)
    rows = ablate(run.model, tr, va, run.train, out, run.augment)
    write_ablation_csv(rows, out / "ablation.csv")
    _dump({"rows": rows, "config": run.to_dict()}, out / "ablation.json")
    plot_ablation(rows, out / "ablation.png")
    print(format_ablation(rows))
    return 0


def cmd_bench(args) -> int:
    if args.full_width:
        cfg = ModelConfig.full_width(args.input_size or 448)
        if args.num_classes:
            cfg = ModelConfig.full_width(cfg.height, args.num_classes)
    else:
        run = resolve_config(args.config, _overrides(args))
        cfg = run.model
        if args.input_size:
            d = cfg.to_dict()
            d.update(height=args.input_size, width=args.input_size)
            cfg = ModelConfig.from_dict(d)
    if args.runs:
        rep = complexity_report(ContextCrackNet(cfg), runs=args.runs)
    else:
        rep = config_report(cfg)
    d = rep.to_dict()
    if args.json:
        _dump(d, args.json)
    print(json.dumps(d, indent=2, sort_keys=True) if args.format == "json" else rep.to_text())
    return 0


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0]) != HISTORY_FIELDS:
        raise UsageError(f"{path} is not a training history")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def cmd_report(args) -> int:
    """Figures for an existing run directory, plus the history as delimited text."""
    from .plotting import plot_ablation, plot_history

    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory {run} does not exist")
    written = []
    if (run / "history.csv").exists():
        history = read_history(run / "history.csv")
        written.append(plot_history(history, run / "curves.png"))
        print("\t".join(HISTORY_FIELDS))
        for r in history:
            print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in HISTORY_FIELDS))
    if (run / "ablation.json").exists():
        rows = json.loads((run / "ablation.json").read_text())["rows"]
        written.append(plot_ablation(rows, run / "ablation.png"))
        print(format_ablation(rows))
    if not written:
        raise UsageError(f"{run} has neither history.csv nor ablation.json")
    for p in written:
        log.info("wrote %s", p)
    return 0


# -- parser ----------------------------------------------------------------

def _add_overrides(p, with_data=True):
    p.add_argument("--config", help="JSON file with model/train/augment sections")
    if with_data:
        p.add_argument("--data", required=True, help="directory with images/ and masks/")
    p.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    p.add_argument("--use-cagm", type=_bool, metavar="BOOL")
    p.add_argument("--use-rfem", type=_bool, metavar="BOOL")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--size", type=int, help="model input height and width")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", type=_bool, metavar="BOOL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cracknet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic crack dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fg-fraction", type=float, default=0.028)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on an 80:20 split, keep the best checkpoint")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "val"), default="all",
                   help="evaluate the whole set or one side of the training split")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="mask and gate maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-attn", help="directory for one gate-map PNG per decoder stage")
    p.add_argument("--figure", help="optional overlay figure (PNG)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train the four module combinations")
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="parameters, FLOPs and latency")
    _add_overrides(p, with_data=False)
    p.add_argument("--input-size", type=int)
    p.add_argument("--runs", type=int, default=0, help="timed forward passes (0: skip latency)")
    p.add_argument("--full-width", action="store_true", help="full-width encoder with bottleneck blocks")
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="figures and tables for a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _thread_limit():
    value = os.environ.get("CRACKNET_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CRACKNET_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("CRACKNET_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (CrackNetError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
