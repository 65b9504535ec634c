"""Matplotlib renderings written next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curves(reports, path):
    """reports: list of LossReport dicts in iteration order."""
    it = [r["iter"] for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(it, [r["l_det_s"] for r in reports], label="det (student)", lw=1)
    if any(r["l_det_i"] for r in reports):
        ax1.plot(it, [r["l_det_i"] for r in reports], label="det (instructive)", lw=1)
    ax1.plot(it, [r["l_total"] for r in reports], label="total", lw=1, alpha=0.7)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    ax1.set_title("detection losses")
    ax2.plot(it, [r["l_distill"] for r in reports], color="tab:red", lw=1)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("distill loss")
    ax2.set_title("distillation loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(rows, summary, path):
    """Per-seed baseline vs distilled AP50/AP with medians."""
    seeds = [str(r["seed"]) for r in rows]
    x = np.arange(len(rows))
    width = 0.35
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key in zip(axes, ("ap50", "ap")):
        base = [r["baseline"][key] for r in rows]
        lgd = [r["lgd"][key] for r in rows]
        ax.bar(x - width / 2, base, width, label="baseline", color="tab:gray")
        ax.bar(x + width / 2, lgd, width, label="distilled", color="tab:blue")
        ax.axhline(summary[f"median_baseline_{key}"], color="tab:gray", ls="--", lw=1)
        ax.axhline(summary[f"median_lgd_{key}"], color="tab:blue", ls="--", lw=1)
        ax.set_xticks(x)
        ax.set_xticklabels(seeds)
        ax.set_xlabel("seed")
        ax.set_ylabel(key.upper())
        ax.set_title(f"{key.upper()} per seed (dashed: medians)")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curve(points_by_class, path, iou_threshold=0.5):
    """points_by_class: class -> (recall array, precision array)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    drew = False
    for cls, (recall, precision) in sorted(points_by_class.items()):
        if len(recall):
            ax.plot(recall, precision, lw=1.2, label=f"class {cls}")
            drew = True
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"precision-recall @ IoU {iou_threshold}")
    if drew:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_feature_grids(named_maps, path, suptitle=""):
    """Channel-mean heatmaps of (H, W, C) maps, one panel per entry."""
    names = sorted(named_maps)
    n = len(names)
    cols = min(4, max(1, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, name in zip(axes.ravel(), names):
        arr = named_maps[name]
        img = arr.mean(axis=-1) if arr.ndim == 3 else arr
        ax.imshow(img, cmap="viridis")
        ax.set_title(name, fontsize=7)
        ax.axis("off")
    if suptitle:
        fig.suptitle(suptitle, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention_grids(weights_by_level, path):
    """weights_by_level: level index -> (T, N+1, N+1) array."""
    levels = sorted(weights_by_level)
    heads = weights_by_level[levels[0]].shape[0]
    fig, axes = plt.subplots(len(levels), heads,
                             figsize=(1.6 * heads, 1.8 * len(levels)), squeeze=False)
    for li, lvl in enumerate(levels):
        for t in range(heads):
            ax = axes[li][t]
            ax.imshow(weights_by_level[lvl][t], cmap="magma", vmin=0, vmax=1)
            ax.set_title(f"p{lvl} h{t + 1}", fontsize=7)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
