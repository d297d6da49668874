"""Figures written next to the delimited outputs of each CLI run."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _size(scale=1.0):
    width = 6.0 * scale
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence, path) -> Path:
    """Loss and train accuracy per epoch from ``EpochRecord``-like objects."""
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        ax.plot(epochs, [r.loss for r in history], color="tab:blue", label="focal loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [100 * r.accuracy for r in history], color="tab:orange", label="train accuracy")
        ax2.set_ylabel("accuracy (%)")
        ax2.set_ylim(0, 100)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="center right")
        return _save(fig, path)


def plot_confusion(cm: np.ndarray, class_names: Sequence[str], path) -> Path:
    with plt.rc_context(STYLE):
        n = len(class_names)
        fig, ax = plt.subplots(figsize=(1.0 + 0.45 * n, 0.8 + 0.45 * n))
        ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(n), class_names, rotation=45, ha="right")
        ax.set_yticks(range(n), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        hi = cm.max() if cm.size else 0
        for i in range(n):
            for j in range(n):
                if cm[i, j]:
                    ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                            color="white" if cm[i, j] > hi / 2 else "black", fontsize=7)
        return _save(fig, path)


def plot_ablation(result, path) -> Path:
    from .ablation import LABELS

    rows = result.ordered()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        y = np.arange(len(rows))
        ax.barh(y, [100 * r.mean for r in rows], xerr=[100 * r.spread for r in rows],
                color=["tab:gray"] * (len(rows) - 1) + ["tab:blue"], capsize=3)
        for i, r in enumerate(rows):
            ax.scatter([100 * a for a in r.accuracies], [i] * len(r.accuracies), color="black", s=8, zorder=3)
        ax.set_yticks(y, [LABELS[r.variant] for r in rows])
        ax.set_xlabel("eval accuracy (%)")
        ax.set_xlim(0, 100)
        return _save(fig, path)


def plot_frame_map(summary: dict, path) -> Path:
    keys = [k for k in summary if k.startswith("f-mAP@")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        ax.bar(keys, [summary[k] for k in keys], color="tab:blue")
        ax.set_ylabel("f-mAP (%)")
        ax.set_ylim(0, 100)
        return _save(fig, path)
