"""Report figures written next to the CSV/PGM outputs."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "figure.dpi": 100,
}


def _save(fig, path: os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def loss_curve(epochs: Sequence[int], totals: Sequence[float], lrs: Sequence[float], path: os.PathLike) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(epochs, totals, marker="o", ms=3, lw=1.2, color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean total loss")
        ax.grid(alpha=0.3)
        for k in range(1, len(lrs)):
            if lrs[k] != lrs[k - 1]:
                ax.axvline(epochs[k] - 0.5, color="0.6", ls="--", lw=0.8)
        return _save(fig, path)


def attention_grid(
    image: np.ndarray,
    masks: Mapping[tuple[int, int], np.ndarray],
    group_names: Sequence[str],
    path: os.PathLike,
) -> Path:
    """Input image in the first column, then one row of group masks per block."""
    blocks = sorted({b for b, _ in masks})
    K = len(group_names)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(blocks), K + 1, figsize=(1.3 * (K + 1), 1.4 * len(blocks)), squeeze=False)
        for r, b in enumerate(blocks):
            axes[r, 0].imshow(image, cmap="gray", vmin=0, vmax=1)
            axes[r, 0].set_ylabel(f"block {b}")
            for i in range(K):
                axes[r, i + 1].imshow(masks[(b, i)], cmap="viridis", vmin=0, vmax=1)
                if r == 0:
                    axes[r, i + 1].set_title(group_names[i])
            for ax in axes[r]:
                ax.set_xticks([])
                ax.set_yticks([])
        return _save(fig, path)


def affinity_heatmap(matrix: np.ndarray, names: Sequence[str], path: os.PathLike, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 2.8))
        im = ax.imshow(matrix, cmap="magma", vmin=0, vmax=1)
        ax.set_xticks(range(len(names)), names, rotation=60, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("sender")
        ax.set_ylabel("receiver")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def accuracy_bars(pred_acc: np.ndarray, bal_acc: np.ndarray, names: Sequence[str], path: os.PathLike) -> Path:
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.28 * len(names) + 1), 2.6))
        ax.bar(x - 0.2, pred_acc, width=0.4, label="prediction")
        ax.bar(x + 0.2, np.nan_to_num(bal_acc), width=0.4, label="balanced")
        ax.set_xticks(x, names, rotation=70, ha="right")
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("accuracy")
        ax.legend(loc="lower right")
        return _save(fig, path)
