"""Figures for run timelines and policy comparisons, rendered straight to files."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# grey = frozen, blue = active
FROZEN_ACTIVE = LinearSegmentedColormap.from_list("frozen_active", ["#bdbdbd", "#08519c"])


def figsize(scale=1.0, ratio=None):
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * ratio


def layer_timeline(matrix, layers, path, title=None):
    """Heatmap of active-gradient fraction, epochs on x, layers (top layer up) on y."""
    matrix = np.asarray(matrix, dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        im = ax.imshow(matrix.T, origin="lower", aspect="auto", cmap=FROZEN_ACTIVE,
                       vmin=0.0, vmax=1.0, interpolation="nearest",
                       extent=(0.5, matrix.shape[0] + 0.5, -0.5, len(layers) - 0.5))
        ax.set_yticks(range(len(layers)))
        ax.set_yticklabels(layers)
        ax.set_xticks(range(1, matrix.shape[0] + 1))
        ax.set_xlabel("epoch")
        ax.set_ylabel("layer")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, label="active fraction")
        fig.savefig(path)
        plt.close(fig)


def metric_curves(epochs, accuracy, loss, path, title=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        ax.plot(epochs, accuracy, "o-", color="#08519c", label="test accuracy")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax2 = ax.twinx()
        ax2.plot(epochs, loss, "s--", color="#a50f15", label="train loss")
        ax2.set_ylabel("train loss")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)


def tstat_bars(policies, tvalues, path, baseline="SFT"):
    """Bar chart of paired t statistics against the baseline; infinite values are clipped and hatched."""
    t = np.asarray(tvalues, dtype=float)
    finite = t[np.isfinite(t)]
    cap = max(float(np.abs(finite).max()) * 1.2, 1.0) if finite.size else 1.0
    shown = np.clip(np.nan_to_num(t, nan=0.0), -cap, cap)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        bars = ax.bar(range(len(policies)), shown, color=["#08519c" if v >= 0 else "#a50f15" for v in shown])
        for bar, v in zip(bars, t):
            if not np.isfinite(v):
                bar.set_hatch("//")
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xticks(range(len(policies)))
        ax.set_xticklabels(policies, rotation=30, ha="right")
        ax.set_ylabel(f"paired t vs {baseline}")
        fig.savefig(path)
        plt.close(fig)


def accuracy_overlay(curves: dict, path):
    """Mean test accuracy per epoch for several policies on one axis."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        for name, (epochs, acc) in curves.items():
            ax.plot(epochs, acc, marker="o", markersize=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean test accuracy")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
