"""AdamW, plateau scheduling, checkpoints, and the train / evaluate / ablate loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import AugmentConfig, Sample, augment, sample_rng, stack_batch
from .errors import CheckpointFormatError, ConfigError, OptimizerError, TrainingError, UsageError
from .losses import (BinaryLossConfig, MultiClassLossConfig, binary_combined, class_weights,
                     multiclass_combined, one_hot)
from .metrics import ConfusionCounts, MetricsReport, confusion
from .model import ContextCrackNet, ModelConfig, predict_mask, probabilities
from .nn import Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "miou", "dice", "precision", "recall")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 8
    epochs: int = 200
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    min_delta: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    class_weights: str | None = "auto"
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
               state: AdamWState, lr: float, weight_decay: float,
               names: Sequence[str] | None = None) -> None:
    """One in-place AdamW update: decoupled decay, then the bias-corrected Adam step."""
    for i, g in enumerate(grads):
        if g is None:
            name = names[i] if names is not None else f"#{i}"
            raise OptimizerError(f"parameter {name} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 1e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params: list[Tensor] = [p for _, p in named]
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamWState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params],
                   self.state, self.lr, self.weight_decay, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PlateauScheduler:
    """Multiply the lr by ``factor`` once ``patience`` consecutive epochs
    fail to improve the best validation loss by more than ``min_delta``."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-6
    best: float = math.inf
    stale: int = 0

    def step(self, val_loss: float) -> float | None:
        """Record one epoch; returns the new lr when a reduction fires."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
            return None
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
            return self.lr
        return None


def plateau_step(scheduler: PlateauScheduler, val_loss: float) -> float | None:
    return scheduler.step(val_loss)


# -- checkpoints -----------------------------------------------------------
#
# Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header,
# then each tensor as raw little-endian float64 in header order.

MAGIC = b"CRKNET01"


def save_checkpoint(path, model: ContextCrackNet, extra: dict | None = None) -> Path:
    path = Path(path)
    state = model.state_dict()
    entries, offset = [], 0
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "cracknet-checkpoint",
        "version": 1,
        "model_config": model.config.to_dict(),
        "seed": model.config.seed,
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Header dict and ``name -> array`` mapping."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a cracknet checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    body = raw[16 + n:]
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * 8 for e in entries)
    if len(body) != expected:
        raise CheckpointFormatError(f"{path}: payload is {len(body)} bytes, header implies {expected}")
    state = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, state


def load_checkpoint(path) -> tuple[ContextCrackNet, dict]:
    header, state = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header["model_config"])
        model = ContextCrackNet(config)
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointFormatError(f"{path}: header does not describe a loadable model ({exc})") from exc
    model.eval()
    return model, header


# -- losses over a batch ---------------------------------------------------

def batch_loss(model: ContextCrackNet, images: np.ndarray, masks: np.ndarray,
               config: TrainConfig, weights=None) -> Tensor:
    probs = probabilities(model(Tensor(images)))
    K = model.config.num_classes
    if K == 1:
        target = masks[:, None].astype(np.float64)
        return binary_combined(probs, target, BinaryLossConfig(config.alpha, config.beta))
    cfg = MultiClassLossConfig(config.gamma, config.delta,
                               class_weights=None if weights is None else tuple(weights))
    return multiclass_combined(probs, one_hot(masks, K), cfg)


def _batches(samples, batch_size):
    for i in range(0, len(samples), batch_size):
        yield samples[i:i + batch_size]


def _resolve_weights(samples, config: TrainConfig, num_classes: int):
    if num_classes == 1 or config.class_weights in (None, "none"):
        return None
    if config.class_weights == "auto":
        return class_weights([s.mask for s in samples], num_classes)
    return np.asarray(config.class_weights, dtype=np.float64)


# -- evaluation ------------------------------------------------------------

def evaluate_counts(model: ContextCrackNet, samples, batch_size: int = 8,
                    config: TrainConfig | None = None, weights=None):
    """Confusion counts over the dataset, plus mean loss when ``config`` is given."""
    model.eval()
    n_labels = max(2, model.config.num_classes)
    counts = ConfusionCounts.zeros(n_labels)
    loss_sum = 0.0
    with no_grad():
        for batch in _batches(list(samples), batch_size):
            images, masks = stack_batch(batch)
            logits = model(Tensor(images))
            counts = counts + confusion(predict_mask(logits), masks, n_labels)
            if config is not None:
                probs = probabilities(logits)
                K = model.config.num_classes
                if K == 1:
                    loss = binary_combined(probs, masks[:, None].astype(np.float64),
                                           BinaryLossConfig(config.alpha, config.beta))
                else:
                    cfg = MultiClassLossConfig(config.gamma, config.delta,
                                               class_weights=None if weights is None else tuple(weights))
                    loss = multiclass_combined(probs, one_hot(masks, K), cfg)
                loss_sum += loss.item() * len(batch)
    mean_loss = loss_sum / max(1, len(samples))
    return counts, mean_loss


def evaluate(model: ContextCrackNet, samples, batch_size: int = 8) -> MetricsReport:
    if not samples:
        raise UsageError("cannot evaluate on an empty dataset")
    counts, _ = evaluate_counts(model, samples, batch_size)
    return MetricsReport.from_counts(counts, model.config.to_dict())


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float
    checkpoint: Path | None
    final_metrics: dict


def write_history(path, history) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def train(model: ContextCrackNet, train_set: Sequence[Sample], val_set: Sequence[Sample],
          config: TrainConfig, out_dir=None, augment_config: AugmentConfig | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded training loop; keeps the best-validation-loss checkpoint in ``out_dir``."""
    if not train_set or not val_set:
        raise UsageError("train and validation sets must be non-empty")
    train_set, val_set = list(train_set), list(val_set)
    out = Path(out_dir) if out_dir is not None else None
    aug = augment_config if augment_config is not None else AugmentConfig()
    weights = _resolve_weights(train_set, config, model.config.num_classes)
    opt = AdamW(model.named_parameters(), config.lr, config.weight_decay,
                (config.beta1, config.beta2), config.adam_eps)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.min_delta)
    log.info("train config: %s", json.dumps(config.to_dict(), sort_keys=True))
    log.info("model config: %s", json.dumps(model.config.to_dict(), sort_keys=True))

    history, best_loss, best_epoch, ckpt = [], math.inf, 0, None
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        epoch_loss = 0.0
        for b, idx in enumerate(_batches(order, config.batch_size)):
            batch = [train_set[i] for i in idx]
            if config.augment:
                batch = [augment(s, aug, sample_rng(config.seed, epoch, s.id)) for s in batch]
            images, masks = stack_batch(batch)
            loss = batch_loss(model, images, masks, config, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += value * len(batch)
        lr_used = opt.lr
        counts, val_loss = evaluate_counts(model, val_set, config.batch_size, config, weights)
        report = MetricsReport.from_counts(counts)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / len(train_set),
            "val_loss": val_loss,
            "lr": lr_used,
            "miou": report.miou,
            "dice": report.dice,
            "precision": report.precision,
            "recall": report.recall,
        }
        history.append(row)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            if out is not None:
                ckpt = save_checkpoint(out / "best.ckpt", model, {
                    "epoch": epoch, "val_loss": val_loss, "val_metrics": report.to_dict(),
                    "train_config": config.to_dict(),
                })
        new_lr = sched.step(val_loss)
        if new_lr is not None:
            opt.lr = new_lr
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d train %.5f val %.5f dice %.4f lr %.2e", epoch, row["train_loss"],
                 val_loss, report.dice, lr_used)
    if out is not None:
        write_history(out / "history.csv", history)
    final = history[-1] if history else {}
    return TrainResult(history, best_epoch, best_loss, ckpt, final)


# -- ablation --------------------------------------------------------------

ABLATION_GRID = (
    ("Baseline", False, False),
    ("RFEM Only", True, False),
    ("CAGM Only", False, True),
    ("RFEM + CAGM", True, True),
)


def ablation_configs(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    out = []
    for name, use_rfem, use_cagm in ABLATION_GRID:
        d = base.to_dict()
        d.update(use_rfem=use_rfem, use_cagm=use_cagm)
        out.append((name, ModelConfig.from_dict(d)))
    return out


def ablate(base: ModelConfig, train_set, val_set, config: TrainConfig, out_dir=None,
           augment_config: AugmentConfig | None = None) -> list[dict]:
    """Train and evaluate the four module combinations with a shared seed and schedule."""
    rows = []
    for name, cfg in ablation_configs(base):
        model = ContextCrackNet(cfg)
        sub = Path(out_dir) / name.lower().replace(" + ", "_").replace(" ", "_") if out_dir else None
        train(model, train_set, val_set, config, sub, augment_config)
        report = evaluate(model, val_set, config.batch_size)
        rows.append({
            "configuration": name,
            "use_rfem": cfg.use_rfem,
            "use_cagm": cfg.use_cagm,
            "params": model.num_parameters(),
            "miou": report.miou,
            "dice": report.dice,
            "precision": report.precision,
            "recall": report.recall,
        })
    return rows


def format_ablation(rows) -> str:
    lines = [f"{'Configuration':<14} {'mIoU':>7} {'Dice Score':>11} {'Precision':>10} {'Recall':>7} {'Params':>10}"]
    for r in rows:
        lines.append(f"{r['configuration']:<14} {r['miou']:7.4f} {r['dice']:11.4f} "
                     f"{r['precision']:10.4f} {r['recall']:7.4f} {r['params']:>10d}")
    return "\n".join(lines)
