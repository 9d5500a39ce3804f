"""Figures written next to the tab-separated reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

COLORS = ["#268BD2", "#2AA198", "#859900", "#B58900", "#CB4B16", "#DC322F", "#D33682", "#6C71C4"]
CLASS_COLORS = ["#000000", "#E6194B", "#3CB44B", "#4363D8", "#FFE119", "#F032E6", "#42D4F4", "#F58231"]


def _style(ax):
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    ax.yaxis.grid(color="black", linestyle=(0, (5, 10)), linewidth=0.3, zorder=0)


def save_figure(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def width_tradeoff(widths, mious, gflops, path):
    """mIoU against FLOPs, one marker per width."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(gflops, mious, "-o", color=COLORS[0], zorder=3)
    for w, x, y in zip(widths, gflops, mious):
        ax.annotate(f"x{w:g}", (x, y), textcoords="offset points", xytext=(4, -10), fontsize=8)
    ax.set_xlabel("MFLOPs per image")
    ax.set_ylabel("val mIoU")
    _style(ax)
    return save_figure(fig, path)


def error_histograms(bins, counts_by_label: dict[str, np.ndarray], path):
    """Grouped bars of error-pixel counts per distance bin."""
    edges = list(bins)
    names = [f"[{lo:g},{hi:g})" for lo, hi in zip(edges[:-1], edges[1:])]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(names))
    step = 0.8 / max(1, len(counts_by_label))
    for i, (label, counts) in enumerate(counts_by_label.items()):
        ax.bar(x + i * step - 0.4 + step / 2, counts, step, label=label, color=COLORS[i % len(COLORS)], zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_xlabel("distance to nearest boundary (px)")
    ax.set_ylabel("error pixels")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return save_figure(fig, path)


def diff_panels(full_pred, diffs: dict[str, np.ndarray], num_classes: int, path):
    """Full-width prediction followed by disagreement maps coloured by GT class.

    ``diffs`` values hold -1 where predictions agree, else the GT class id.
    """
    cmap = ListedColormap(CLASS_COLORS[: max(num_classes, 2)])
    fig, axes = plt.subplots(1, 1 + len(diffs), figsize=(2.2 * (1 + len(diffs)), 2.4))
    axes = np.atleast_1d(axes)
    axes[0].imshow(full_pred, cmap=cmap, vmin=0, vmax=num_classes - 1, interpolation="nearest")
    axes[0].set_title("x1.0", fontsize=9)
    for ax, (label, d) in zip(axes[1:], diffs.items()):
        # agreement renders black, disagreement in the GT colour
        shown = np.where(d < 0, 0, d)
        ax.imshow(shown, cmap=cmap, vmin=0, vmax=num_classes - 1, interpolation="nearest")
        ax.set_title(label, fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return save_figure(fig, path)


def loss_curves(iterations, totals: dict[str, np.ndarray], path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for i, (label, ys) in enumerate(totals.items()):
        ax.plot(iterations, ys, lw=0.8, color=COLORS[i % len(COLORS)], label=label)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return save_figure(fig, path)


def flops_split(widths, encoder, decoder, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    x = np.arange(len(widths))
    ax.bar(x, encoder, 0.6, color=COLORS[0], label="encoder", zorder=3)
    ax.bar(x, decoder, 0.6, bottom=encoder, color=COLORS[4], label="decoder + PPM", zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels([f"x{w:g}" for w in widths])
    ax.set_ylabel("MFLOPs per image")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return save_figure(fig, path)
