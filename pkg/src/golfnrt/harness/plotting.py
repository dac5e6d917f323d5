"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ray_pdf(path, coarse_depths, coarse_weights, grid, density, fine_depths=None,
                 truth: float | None = None, title: str = "") -> Path:
    """Coarse attention weights (stems) against the smoothed density."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    spacing = np.diff(coarse_depths).mean() if len(coarse_depths) > 1 else 1.0
    ax.bar(coarse_depths, np.asarray(coarse_weights) / spacing, width=spacing * 0.8, alpha=0.35,
           color="tab:blue", label="coarse weights / spacing")
    ax.plot(grid, density, color="tab:red", lw=1.5, label="smoothed density")
    if fine_depths is not None and len(fine_depths):
        ax.plot(fine_depths, np.zeros_like(fine_depths), "|", color="k", ms=12, label="refined samples")
    if truth is not None:
        ax.axvline(truth, color="tab:green", ls="--", label="surface")
    ax.set_xlabel("depth along ray")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_attention(path, depths: np.ndarray, weights: np.ndarray, truths: Sequence[float] | None = None,
                   labels: Sequence[str] | None = None) -> Path:
    """Final-stage readout weights for a handful of rays."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i, (d, w) in enumerate(zip(depths, weights)):
        line, = ax.plot(d, w, marker=".", lw=1, label=labels[i] if labels else f"ray {i}")
        if truths is not None:
            ax.axvline(truths[i], color=line.get_color(), ls=":", lw=1)
    ax.set_xlabel("depth along ray")
    ax.set_ylabel("attention weight")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_scaling(path, pixels: Sequence[int], sparse: Sequence[float], full: Sequence[float],
                 what: str = "FLOPs") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.loglog(pixels, sparse, "o-", label="block + grid + view")
    ax.loglog(pixels, full, "s-", label="full attention")
    ax.set_xlabel("pixels per view (H*W)")
    ax.set_ylabel(what)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_loss(path, history: Sequence[tuple[int, float, float]]) -> Path:
    steps = np.array([h[0] for h in history])
    err = np.array([h[1] for h in history])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(steps, err, lw=0.6, alpha=0.5, label="mse")
    if len(err) >= 20:
        k = max(5, len(err) // 50)
        smooth = np.convolve(err, np.ones(k) / k, mode="valid")
        ax.semilogy(steps[k - 1:], smooth, lw=1.5, label=f"mean of {k}")
    ax.set_xlabel("step")
    ax.set_ylabel("training mse")
    ax.legend()
    return _save(fig, path)


def plot_comparison(path, truth: np.ndarray, rendered: np.ndarray, truth_depth: np.ndarray | None = None,
                    depth: np.ndarray | None = None, title: str = "") -> Path:
    cols = 4 if depth is not None else 2
    fig, axes = plt.subplots(1, cols, figsize=(2.6 * cols, 2.8))
    axes[0].imshow(np.clip(truth, 0, 1))
    axes[0].set_title("ground truth")
    axes[1].imshow(np.clip(rendered, 0, 1))
    axes[1].set_title("rendered")
    if depth is not None:
        finite = truth_depth[np.isfinite(truth_depth)]
        lo, hi = (finite.min(), finite.max()) if finite.size else (0, 1)
        axes[2].imshow(np.where(np.isfinite(truth_depth), truth_depth, hi), vmin=lo, vmax=hi)
        axes[2].set_title("true depth")
        axes[3].imshow(depth, vmin=lo, vmax=hi)
        axes[3].set_title("expected depth")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    return _save(fig, path)
