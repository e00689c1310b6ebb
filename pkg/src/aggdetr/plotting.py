"""Figures written next to the tabular reports (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def ablation_bars(result, path) -> Path:
    """Target mAP per row: bar at the seed mean, one dot per seed."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(result.rows), 3.2))
    x = np.arange(len(result.rows))
    means = [result.target_map(r).mean() * 100 for r in result.rows]
    ax.bar(x, means, color="#8aa9c9", edgecolor="#35516e")
    for i, row in enumerate(result.rows):
        vals = result.target_map(row) * 100
        ax.scatter(np.full(len(vals), i), vals, s=12, color="k", zorder=3)
    ax.set_xticks(x, result.rows)
    ax.set_ylabel("target mAP@0.5 (%)")
    ax.set_xlabel("ablation row")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(records: list[dict], path, smooth: int = 50) -> Path:
    """Total and per-component loss against iteration, one panel per training step."""
    path = Path(path)
    steps = sorted({r["step"] for r in records})
    fig, axes = plt.subplots(1, len(steps), figsize=(5 * len(steps), 3.2), squeeze=False)
    for ax, step in zip(axes[0], steps):
        recs = [r for r in records if r["step"] == step]
        for key in ("total", "l_det", "l_cq", "l_fq", "l_bc", "l_dc"):
            vals = np.array([r[key] for r in recs], dtype=float)
            if not np.any(vals):
                continue
            k = min(smooth, len(vals))
            ax.plot(np.convolve(vals, np.ones(k) / k, mode="valid"), label=key, lw=1)
        ax.set_title(f"step {step}")
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def attention_overlay(image: np.ndarray, grid_map: np.ndarray, path, title: str = "") -> Path:
    """Image with the attention grid upsampled over it."""
    path = Path(path)
    size = image.shape[-1]
    h, w = grid_map.shape
    up = np.kron(grid_map, np.ones((size // h, size // w)))
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(np.transpose(image, (1, 2, 0)))
    ax.imshow(up, cmap="inferno", alpha=0.55)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
