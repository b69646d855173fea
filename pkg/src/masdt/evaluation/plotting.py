"""Figures written next to the CSV/JSON outputs (ROC, losses, saliency, sweeps)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, Sequence, Tuple

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
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

# PNG metadata otherwise embeds the matplotlib version
_PNG_META = {"Software": None}


def new_figure(width: float = 3.6, aspect: float = 0.8, ncols: int = 1):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, ncols, figsize=(width * ncols, width * aspect))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata=_PNG_META if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_roc(curves: Dict[str, Tuple[np.ndarray, np.ndarray, float]], path) -> Path:
    """``curves`` maps a legend label to (fpr, tpr, auc)."""
    fig, ax = new_figure()
    for label, (fpr, tpr, area) in curves.items():
        ax.plot(fpr, tpr, lw=1.5, label=f"{label} (AUC {area:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", frameon=False)
    return save(fig, path)


def plot_losses(series: Dict[str, Sequence[Tuple[int, float]]], path, ylabel: str = "loss") -> Path:
    fig, ax = new_figure()
    for label, rows in series.items():
        if rows:
            e, v = zip(*rows)
            ax.plot(e, v, marker=".", lw=1.2, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(frameon=False)
    return save(fig, path)


def plot_saliency(image: np.ndarray, saliency: np.ndarray, path, region: np.ndarray = None) -> Path:
    """Frame, its saliency map, and the overlay side by side."""
    fig, axes = new_figure(width=2.0, aspect=1.0, ncols=3)
    rgb = np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1)
    h, w = rgb.shape[:2]
    extent = (0, w, h, 0)
    axes[0].imshow(rgb)
    axes[1].imshow(saliency, cmap="jet", vmin=0, vmax=1, extent=extent)
    axes[2].imshow(rgb)
    axes[2].imshow(saliency, cmap="jet", vmin=0, vmax=1, alpha=0.45, extent=extent,
                   interpolation="bilinear")
    if region is not None:
        for ax in axes:
            ax.contour(region.astype(float), levels=[0.5], colors="w", linewidths=0.8)
    for ax, title in zip(axes, ("frame", "Grad-CAM", "overlay")):
        ax.set_title(title)
        ax.axis("off")
    return save(fig, path)


def plot_alpha_sweep(rows: Iterable[Tuple[float, float]], path, best: float = None) -> Path:
    fig, ax = new_figure()
    a, v = zip(*rows)
    ax.plot(a, v, marker="o", lw=1.2)
    if best is not None:
        ax.axvline(best, color="0.5", ls=":", lw=1)
    ax.set_xlabel("fusion weight (spatial share)")
    ax.set_ylabel("validation AUC")
    return save(fig, path)


def plot_bars(rows: Sequence[Tuple[str, float]], path, ylabel: str = "AUC") -> Path:
    fig, ax = new_figure()
    names, vals = zip(*rows)
    ax.bar(range(len(vals)), vals, color="0.35", width=0.6)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(ylabel)
    return save(fig, path)
