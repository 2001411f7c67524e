"""Confusion counts and the mIoU / Dice / precision / recall / F1 report.

Conventions:

* A class absent from both prediction and target scores IoU = Dice = 1
  (and precision = recall = 1) and still enters the mIoU mean.
* For binary tasks the headline Dice, precision, recall and F1 are those of
  the crack class (label 1). With more classes they are macro averages over
  the non-background classes.
* ``miou`` averages every class including background; ``miou_foreground``
  averages only classes ``1..K-1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, target, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction has {pred.size} pixels, target {target.size}")
    matrix = np.bincount(target * num_classes + pred, minlength=num_classes ** 2)
    matrix = matrix.reshape(num_classes, num_classes).astype(np.int64)
    tp = np.diag(matrix).copy()
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: np.ndarray, den: np.ndarray, empty: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.where(empty, 1.0, 0.0)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def per_class_iou(c: ConfusionCounts) -> np.ndarray:
    den = c.tp + c.fp + c.fn
    return _ratio(c.tp, den, den == 0)


def per_class_dice(c: ConfusionCounts) -> np.ndarray:
    den = 2 * c.tp + c.fp + c.fn
    return _ratio(2 * c.tp, den, den == 0)


def per_class_precision(c: ConfusionCounts) -> np.ndarray:
    return _ratio(c.tp, c.tp + c.fp, (c.tp + c.fp + c.fn) == 0)


def per_class_recall(c: ConfusionCounts) -> np.ndarray:
    return _ratio(c.tp, c.tp + c.fn, (c.tp + c.fp + c.fn) == 0)


def per_class_f1(c: ConfusionCounts) -> np.ndarray:
    p, r = per_class_precision(c), per_class_recall(c)
    s = p + r
    return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)


def _headline(values: np.ndarray) -> float:
    return float(values[1]) if len(values) == 2 else float(values[1:].mean()) if len(values) > 2 else float(values[0])


def miou(c: ConfusionCounts) -> float:
    return float(per_class_iou(c).mean())


def dice(c: ConfusionCounts) -> float:
    return _headline(per_class_dice(c))


def precision(c: ConfusionCounts) -> float:
    return _headline(per_class_precision(c))


def recall(c: ConfusionCounts) -> float:
    return _headline(per_class_recall(c))


def f1(c: ConfusionCounts) -> float:
    return _headline(per_class_f1(c))


@dataclass
class MetricsReport:
    per_class_iou: list
    miou: float
    miou_foreground: float
    dice: float
    precision: float
    recall: float
    f1: float
    pixels: int
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, c: ConfusionCounts, config: dict | None = None) -> "MetricsReport":
        ious = per_class_iou(c)
        fg = ious[1:] if len(ious) > 1 else ious
        return cls(
            per_class_iou=[float(v) for v in ious],
            miou=float(ious.mean()),
            miou_foreground=float(fg.mean()),
            dice=dice(c),
            precision=precision(c),
            recall=recall(c),
            f1=f1(c),
            pixels=int(c.total[0]),
            counts={k: getattr(c, k).tolist() for k in ("tp", "fp", "fn", "tn")},
            config=dict(config or {}),
        )

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_foreground": self.miou_foreground,
            "dice": self.dice,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class_iou": self.per_class_iou,
            "pixels": self.pixels,
            "counts": self.counts,
            "conventions": {
                "miou": "mean IoU over all classes incl. background",
                "miou_foreground": "mean IoU over non-background classes",
                "empty_class": "IoU = Dice = 1 when a class is absent from prediction and target",
                "headline": "Dice/precision/recall/F1 of class 1 (binary) or macro over classes 1..K-1",
            },
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_table(self) -> str:
        header = f"{'mIoU':>8} {'mIoU(fg)':>9} {'Dice':>8} {'Recall':>8} {'Precision':>10} {'F1':>8}"
        row = (f"{self.miou:8.4f} {self.miou_foreground:9.4f} {self.dice:8.4f} "
               f"{self.recall:8.4f} {self.precision:10.4f} {self.f1:8.4f}")
        return header + "\n" + row
