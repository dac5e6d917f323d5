"""Attention weights -> smooth depth density -> refined samples.

The ray transformer's readout weights ``w_i`` over coarse depths ``d_i`` are
smoothed with a Nadaraya-Watson estimate under a Gaussian kernel,

    p(d) = sum_i w_i K(d, d_i) / sum_j K(d, d_j),

evaluated on a dense grid over ``[near, far]``.  The estimate is a regression
of weights, not a density, so it is renormalized by its trapezoidal integral
before the CDF is built.  Refined depths are drawn by inverting the CDF.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import RayBundle, SamplePoints, sample_uniform

DEDUP_TOL = 1e-9


def gaussian_kernel(d, d_i, h: float):
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    z = (np.asarray(d, dtype=np.float64) - np.asarray(d_i, dtype=np.float64)) / h
    return np.exp(-0.5 * z * z) / (h * math.sqrt(2.0 * math.pi))


def ray_streams(seed: int, *keys: int, count: int) -> list[np.random.Generator]:
    """One independent generator per ray, keyed by ``(seed, *keys, ray index)``."""
    return [np.random.default_rng([seed, *keys, i]) for i in range(count)]


@dataclass
class SamplePdf:
    """Density on a uniform grid (arrays may carry a leading ray axis)."""

    grid: np.ndarray
    density: np.ndarray
    cdf: np.ndarray
    bandwidth: np.ndarray | float
    depths: np.ndarray
    weights: np.ndarray
    raw: np.ndarray           # kernel-regression estimate before renormalization
    fallback: np.ndarray | bool = False  # degenerate weights replaced by a uniform density

    def __getitem__(self, i: int) -> "SamplePdf":
        return SamplePdf(self.grid[i], self.density[i], self.cdf[i], np.asarray(self.bandwidth)[i],
                         self.depths[i], self.weights[i], self.raw[i], bool(np.asarray(self.fallback)[i]))

    def integral(self) -> np.ndarray:
        return _trapezoid(self.density, self.grid)

    def mass_between(self, lo, hi) -> np.ndarray:
        """Probability mass in ``[lo, hi]`` (per ray), by interpolating the CDF."""
        grid = np.atleast_2d(self.grid)
        cdf = np.atleast_2d(self.cdf)
        lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (len(grid),))
        hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (len(grid),))
        out = np.array([np.interp(b, g, c) - np.interp(a, g, c) for g, c, a, b in zip(grid, cdf, lo, hi)])
        return out if np.ndim(self.grid) == 2 else out[0]


def _trapezoid(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    dx = np.diff(x, axis=-1)
    return (0.5 * (y[..., 1:] + y[..., :-1]) * dx).sum(axis=-1)


def _cumulative_trapezoid(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    dx = np.diff(x, axis=-1)
    steps = 0.5 * (y[..., 1:] + y[..., :-1]) * dx
    zero = np.zeros(steps.shape[:-1] + (1,))
    return np.concatenate([zero, np.cumsum(steps, axis=-1)], axis=-1)


def nadaraya_watson(grid: np.ndarray, depths: np.ndarray, weights: np.ndarray, h) -> np.ndarray:
    """Evaluate the weighted kernel regression on ``grid``.  Shapes: grid
    ``(..., M)``, depths/weights ``(..., K)``, h scalar or ``(...)``.  The
    kernel's normalizing constant cancels, and log-space shifting keeps
    points far from every ``d_i`` finite."""
    h = np.asarray(h, dtype=np.float64)[..., None, None]
    z = (grid[..., :, None] - depths[..., None, :]) / h
    logk = -0.5 * z * z
    logk -= logk.max(axis=-1, keepdims=True)
    k = np.exp(logk)
    return (k * weights[..., None, :]).sum(-1) / k.sum(-1)


def kernel_regress(depths, weights, h, grid_size: int, near, far) -> SamplePdf:
    """Smoothed, normalized density from coarse depths and their weights.

    Accepts a single ray (1-D ``depths``) or a batch (``B x K``).
    """
    depths = np.asarray(depths, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    single = depths.ndim == 1
    if single:
        depths, weights = depths[None], weights[None]
    B = depths.shape[0]
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (B,)).copy()
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    if np.any(np.diff(depths, axis=-1) <= 0):
        raise ValueError("coarse depths must be strictly increasing")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (B,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (B,))
    t = np.linspace(0.0, 1.0, grid_size)
    grid = near[:, None] + t[None, :] * (far - near)[:, None]

    raw = nadaraya_watson(grid, depths, weights, h)
    p = np.maximum(raw, 0.0)
    total = _trapezoid(p, grid)
    fallback = ~(total > 0) | ~np.isfinite(total)
    if np.any(fallback):
        warnings.warn("degenerate attention weights; using a uniform depth density", RuntimeWarning)
        p[fallback] = 1.0
        total = np.where(fallback, _trapezoid(p, grid), total)
    density = p / total[:, None]
    cdf = _cumulative_trapezoid(density, grid)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0

    pdf = SamplePdf(grid, density, cdf, h, depths, weights, raw, fallback)
    return pdf[0] if single else pdf


def inverse_cdf(grid: np.ndarray, cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Piecewise-linear inverse of one CDF (flat stretches are skipped)."""
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(cdf) - 2)
    lo, hi = cdf[idx], cdf[idx + 1]
    span = hi - lo
    frac = np.where(span > 0, (u - lo) / np.where(span > 0, span, 1.0), 0.0)
    return grid[idx] + np.clip(frac, 0.0, 1.0) * (grid[idx + 1] - grid[idx])


def inverse_transform_sample(pdf: SamplePdf, count: int, rng=None, stratified: bool = True) -> np.ndarray:
    """Draw ``count`` sorted depths from ``pdf``.

    Stratified draws use ``u_j = (j + xi_j) / count``; with ``stratified=False``
    the bin midpoints ``(j + 0.5) / count`` are used (deterministic).  For a
    batched pdf, ``rng`` may be a list with one generator per ray.
    """
    batched = np.ndim(pdf.grid) == 2
    grids = np.atleast_2d(pdf.grid)
    cdfs = np.atleast_2d(pdf.cdf)
    B = len(grids)
    if count == 0:
        return np.zeros((B, 0)) if batched else np.zeros(0)
    base = np.arange(count)
    out = np.empty((B, count))
    for b in range(B):
        if stratified:
            g = rng[b] if isinstance(rng, (list, tuple)) else (rng if rng is not None else np.random.default_rng())
            u = (base + g.random(count)) / count
        else:
            u = (base + 0.5) / count
        out[b] = np.sort(inverse_cdf(grids[b], cdfs[b], u))
    return out if batched else out[0]


def merge_samples(rays: RayBundle, coarse: np.ndarray, fine: np.ndarray, tol: float = DEDUP_TOL) -> SamplePoints:
    """Union of coarse and fine depths per ray, sorted, near-duplicates removed.
    Rows are padded back to a common length with invalid slots at the end."""
    B = len(rays)
    total = coarse.shape[1] + fine.shape[1]
    depths = np.empty((B, total))
    valid = np.zeros((B, total), dtype=bool)
    for b in range(B):
        d = np.sort(np.concatenate([coarse[b], fine[b]]))
        keep = np.concatenate([[True], np.diff(d) > tol])
        d = d[keep]
        depths[b, : len(d)] = d
        depths[b, len(d):] = d[-1]
        valid[b, : len(d)] = True
    return SamplePoints.along(rays, depths, valid)


@dataclass
class TwoStageResult:
    samples: SamplePoints     # merged coarse + fine samples
    feature: object           # stage-2 output of ``run``
    coarse: SamplePoints
    coarse_feature: object
    pdf: SamplePdf | None
    fine_depths: np.ndarray


def two_stage_sample(rays: RayBundle, run: Callable[[SamplePoints, bool], object],
                     weights_of: Callable[[object], np.ndarray], n_coarse: int, n_fine: int, *,
                     bandwidth_factor: float = 1.5, grid_factor: int = 4, jitter: bool = False,
                     coarse_rngs: Sequence[np.random.Generator] | None = None,
                     fine_rngs: Sequence[np.random.Generator] | None = None,
                     coarse_grad: bool = False, fine_depths: np.ndarray | None = None) -> TwoStageResult:
    """Uniform stage, density estimate from its attention weights, refined
    draws, then the merged set through the same transformer.

    ``run(samples, with_grad)`` evaluates the transformer on a set of samples;
    ``weights_of`` pulls the per-sample weights (B x S) out of its result.
    Passing ``fine_depths`` pins the refined depths instead of drawing them,
    which makes the output a smooth function of the parameters (used by
    finite-difference checks, since the draw itself is not differentiated).
    """
    if n_coarse < 2 or n_fine < 0:
        raise ValueError("need n_coarse >= 2 and n_fine >= 0")
    coarse = sample_uniform(rays, n_coarse, jitter=jitter, rng=list(coarse_rngs) if jitter else None)
    coarse_out = run(coarse, coarse_grad)
    if n_fine == 0:
        return TwoStageResult(coarse, run(coarse, True), coarse, coarse_out, None, np.zeros((len(rays), 0)))
    w = np.asarray(weights_of(coarse_out), dtype=np.float64)
    h = bandwidth_factor * (rays.far - rays.near) / n_coarse
    pdf = kernel_regress(coarse.depths, w, h, grid_factor * n_coarse, rays.near, rays.far)
    if fine_depths is not None:
        fine = np.asarray(fine_depths, dtype=np.float64).reshape(len(rays), n_fine)
    else:
        fine = inverse_transform_sample(pdf, n_fine, rng=list(fine_rngs) if jitter else None, stratified=jitter)
    merged = merge_samples(rays, coarse.depths, fine)
    return TwoStageResult(merged, run(merged, True), coarse, coarse_out, pdf, fine)
