"""Segmentation objectives on probabilities: BCE/CE plus soft Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, MissingClassError
from .tensor import Tensor, clip, log, tsum

DICE_EPS = 1e-6
PROB_EPS = 1e-7


@dataclass(frozen=True)
class BinaryLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = DICE_EPS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha and beta must be >= 0 and not both zero")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


@dataclass(frozen=True)
class MultiClassLossConfig:
    gamma: float = 1.0
    delta: float = 1.0
    epsilon: float = DICE_EPS
    class_weights: tuple | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0 or (self.gamma == 0 and self.delta == 0):
            raise ConfigError("gamma and delta must be >= 0 and not both zero")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ConfigError("class weights must be positive")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_probs(pred: Tensor) -> None:
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise DomainError("predictions must be probabilities in [0, 1]")


def _soft_dice(pred: Tensor, target: Tensor, eps: float, axes=None) -> Tensor:
    inter = tsum(pred * target, axes)
    total = tsum(pred, axes) + tsum(target, axes)
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def dice_binary(pred, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p*s) + eps) / (sum(p) + sum(s) + eps)`` over every pixel in the batch."""
    pred, target = _tensor(pred), _tensor(target)
    _check_probs(pred)
    return _soft_dice(pred, target, eps)


def bce(pred, target, eps_c: float = PROB_EPS) -> Tensor:
    pred, target = _tensor(pred), _tensor(target)
    p = clip(pred, eps_c, 1.0 - eps_c)
    per_pixel = target * log(p) + (1.0 - target) * log(1.0 - p)
    return -per_pixel.mean()


def binary_combined(pred, target, config: BinaryLossConfig = BinaryLossConfig()) -> Tensor:
    pred, target = _tensor(pred), _tensor(target)
    loss = None
    if config.alpha:
        loss = config.alpha * bce(pred, target)
    if config.beta:
        d = config.beta * dice_binary(pred, target, config.epsilon)
        loss = d if loss is None else loss + d
    return loss


def dice_multiclass(pred, target, eps: float = DICE_EPS) -> Tensor:
    """Mean over classes (background included) of the per-class soft Dice loss.

    ``pred`` and one-hot ``target`` are ``[B, K, H, W]``.
    """
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape[1] < 2:
        raise DomainError("multi-class Dice needs K >= 2")
    _check_probs(pred)
    if not np.allclose(pred.data.sum(axis=1), 1.0, atol=1e-6):
        raise DomainError("class probabilities must sum to 1 at every pixel")
    per_class = _soft_dice(pred, target, eps, axes=(0, 2, 3))
    return per_class.mean()


def class_weights(masks, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * N_k)`` rescaled to mean 1."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        m = np.asarray(m)
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise DomainError(f"mask labels must lie in [0, {num_classes})")
        counts += np.bincount(m.reshape(-1).astype(np.int64), minlength=num_classes)
    for k, c in enumerate(counts):
        if c == 0:
            raise MissingClassError(k)
    raw = counts.sum() / (num_classes * counts.astype(np.float64))
    return raw / raw.mean()


def inverse_frequency(masks, num_classes: int) -> np.ndarray:
    """The unnormalized ``N / (K * N_k)`` weights."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).reshape(-1).astype(np.int64), minlength=num_classes)
    return counts.sum() / (num_classes * counts.astype(np.float64))


def weighted_ce(pred, target, weights=None, eps_c: float = PROB_EPS) -> Tensor:
    """``-(1/N) sum_i sum_k w_k s_ki log p_ki`` with N = pixels in the batch."""
    pred, target = _tensor(pred), _tensor(target)
    K = pred.shape[1]
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=np.float64)
    n_pixels = pred.shape[0] * pred.shape[2] * pred.shape[3]
    p = clip(pred, eps_c, 1.0)
    weighted = target * log(p) * Tensor(w.reshape(1, K, 1, 1))
    return tsum(weighted) * (-1.0 / n_pixels)


def multiclass_combined(pred, target, config: MultiClassLossConfig = MultiClassLossConfig()) -> Tensor:
    pred, target = _tensor(pred), _tensor(target)
    loss = None
    if config.gamma:
        loss = config.gamma * weighted_ce(pred, target, config.class_weights)
    if config.delta:
        d = config.delta * dice_multiclass(pred, target, config.epsilon)
        loss = d if loss is None else loss + d
    return loss


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``[B, H, W]`` int labels to ``[B, K, H, W]`` float one-hot."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)
