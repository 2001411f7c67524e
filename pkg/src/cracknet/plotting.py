"""Report figures: training curves, ablation bars and attention overlays.

Everything renders off-screen with the Agg backend and is written straight
to PNG; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", bbox_inches="tight")
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Loss curves (left) and validation metrics (right) against epoch."""
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_met) = plt.subplots(1, 2, figsize=(9, 3.4))
        ax_loss.plot(epochs, [r["train_loss"] for r in history], label="train")
        ax_loss.plot(epochs, [r["val_loss"] for r in history], label="val")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        # mark learning-rate cuts
        lrs = [r["lr"] for r in history]
        for e, prev, cur in zip(epochs[1:], lrs, lrs[1:]):
            if cur < prev:
                ax_loss.axvline(e, color="0.7", lw=0.8, ls=":")
        for key in ("miou", "dice", "precision", "recall"):
            ax_met.plot(epochs, [r[key] for r in history], label=key)
        ax_met.set_ylim(0, 1.02)
        ax_met.set_xlabel("epoch")
        ax_met.set_ylabel("validation")
        ax_met.legend(frameon=False, ncol=2)
        for ax in (ax_loss, ax_met):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """Grouped bars, one group per metric, one bar per configuration."""
    metrics = ("miou", "dice", "precision", "recall")
    labels = ("mIoU", "Dice", "Precision", "Recall")
    x = np.arange(len(metrics))
    width = 0.8 / max(1, len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3.4))
        for i, row in enumerate(rows):
            vals = [row[m] for m in metrics]
            bars = ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=row["configuration"])
            ax.bar_label(bars, fmt="%.3f", fontsize=6, padding=1)
        ax.set_xticks(x, labels)
        ax.set_ylim(0, 1.08)
        ax.set_ylabel("score")
        ax.legend(frameon=False, ncol=len(rows), loc="upper center", bbox_to_anchor=(0.5, -0.1))
        fig.tight_layout()
        return _save(fig, path)


def plot_attention_overlay(image: np.ndarray, maps, path, mask: np.ndarray | None = None) -> Path:
    """Input image, optional mask, then each gate map resized onto the image.

    ``image`` is ``[3, H, W]`` in [0, 1]; each map is ``[h, w]`` with values in (0, 1).
    """
    rgb = np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1)
    H, W = rgb.shape[:2]
    panels = 1 + (mask is not None) + len(maps)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, panels, figsize=(2.4 * panels, 2.6))
        axes = np.atleast_1d(axes)
        axes[0].imshow(rgb)
        axes[0].set_title("input")
        k = 1
        if mask is not None:
            axes[k].imshow(mask, cmap="gray", vmin=0, vmax=1)
            axes[k].set_title("mask")
            k += 1
        for i, psi in enumerate(maps):
            psi = np.squeeze(np.asarray(psi))
            axes[k].imshow(rgb)
            im = axes[k].imshow(psi, cmap="jet", alpha=0.5, vmin=0, vmax=1,
                                extent=(-0.5, W - 0.5, H - 0.5, -0.5), interpolation="bilinear")
            axes[k].set_title(f"gate {i} ({psi.shape[0]}x{psi.shape[1]})")
            k += 1
        for ax in axes:
            ax.set_axis_off()
        if maps:
            fig.colorbar(im, ax=list(axes), shrink=0.7, pad=0.02)
        return _save(fig, path)


def plot_prediction(image: np.ndarray, pred: np.ndarray, path, mask: np.ndarray | None = None) -> Path:
    rgb = np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1)
    n = 2 + (mask is not None)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6))
        axes[0].imshow(rgb)
        axes[0].set_title("input")
        axes[1].imshow(pred, cmap="gray")
        axes[1].set_title("prediction")
        if mask is not None:
            axes[2].imshow(mask, cmap="gray")
            axes[2].set_title("mask")
        for ax in axes:
            ax.set_axis_off()
        return _save(fig, path)
