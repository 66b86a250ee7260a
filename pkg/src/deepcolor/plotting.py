"""Report figures written next to the CSV/TSV outputs. Uses the Agg backend only."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import moving_average  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(path, iterations: np.ndarray, losses: np.ndarray, window: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iterations, losses, lw=0.6, alpha=0.5, label="loss")
    ma = moving_average(losses, window)
    if ma.size:
        ax.plot(iterations[window - 1:], ma, lw=1.5, label=f"{window}-step mean")
    if len(losses) and np.all(np.asarray(losses) > 0):
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    return _save(fig, path)


def color_usage(path, iterations: np.ndarray, counts: np.ndarray, window: int = 50) -> Path:
    """Share of instances per foreground color over training (stacked, smoothed)."""
    counts = np.asarray(counts, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if counts.size:
        w = min(window, len(counts))
        smooth = np.stack([moving_average(counts[:, j], w) for j in range(counts.shape[1])], axis=1)
        total = smooth.sum(axis=1, keepdims=True)
        share = np.divide(smooth, total, out=np.zeros_like(smooth), where=total > 0)
        ax.stackplot(iterations[w - 1:], share.T, labels=[f"color {c}" for c in range(2, counts.shape[1] + 2)])
        ax.set_ylim(0, 1)
        ax.legend(loc="center left", bbox_to_anchor=(1.0, 0.5), fontsize=7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("share of instances")
    return _save(fig, path)


def color_histogram(path, hist: Sequence[int]) -> Path:
    """Bar chart of final color usage; ``hist[c]`` counts color ``c``."""
    hist = np.asarray(hist)
    colors = np.arange(2, hist.size)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(colors, hist[2:])
    ax.set_xticks(colors)
    ax.set_xlabel("color")
    ax.set_ylabel("instances")
    return _save(fig, path)


def sweep_heatmap(path, taus: np.ndarray, rhos: np.ndarray, sbd: np.ndarray,
                  best: tuple[float, float]) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 + 0.45 * len(rhos), 1.2 + 0.3 * len(taus)))
    im = ax.imshow(sbd, aspect="auto", origin="lower", cmap="viridis")
    ax.set_xticks(range(len(rhos)))
    ax.set_xticklabels([f"{r:g}" for r in rhos], fontsize=7)
    ax.set_yticks(range(len(taus)))
    ax.set_yticklabels([f"{t:g}" for t in taus], fontsize=7)
    ax.set_xlabel("rho")
    ax.set_ylabel("tau")
    i = int(np.flatnonzero(np.asarray(taus) == best[0])[0])
    j = int(np.flatnonzero(np.asarray(rhos) == best[1])[0])
    ax.plot(j, i, marker="o", mfc="none", mec="red", ms=10)
    fig.colorbar(im, ax=ax, label="mean SBD")
    return _save(fig, path)


def sbd_histogram(path, values: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(np.asarray(values, dtype=float), bins=np.linspace(0, 1, 21))
    ax.set_xlabel("SBD")
    ax.set_ylabel("images")
    return _save(fig, path)
