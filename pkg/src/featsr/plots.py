"""Report figures (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(trace: np.ndarray, path) -> Path:
    """``trace`` rows are (step, loss, ema_loss)."""
    trace = np.asarray(trace, dtype=np.float64).reshape(-1, 3)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(trace[:, 0], trace[:, 1], lw=0.6, alpha=0.5, label="loss")
    ax.plot(trace[:, 0], trace[:, 2], lw=1.5, label="smoothed")
    ax.set_xlabel("step")
    ax.set_ylabel("DSM loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def cmc_curves(curves: dict, path, max_rank: int = 20) -> Path:
    """``curves`` maps row name to Rank-k accuracies for k = 1, 2, ..."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, c in curves.items():
        c = np.asarray(c)[:max_rank]
        ax.plot(np.arange(1, c.size + 1), c, marker="o", ms=2.5, label=name)
    ax.set_xlabel("rank")
    ax.set_ylabel("identification rate")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def sample_grid(columns: dict, path, n: int = 8) -> Path:
    """Side-by-side image columns (e.g. gallery, LR probe, SR rows) for the first ``n`` identities."""
    names = list(columns)
    n = min(n, min(len(columns[k]) for k in names))
    fig, axes = plt.subplots(n, len(names), figsize=(1.2 * len(names), 1.2 * n), squeeze=False)
    for j, name in enumerate(names):
        for i in range(n):
            ax = axes[i, j]
            ax.imshow(columns[name][i], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0, j].set_title(name, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
