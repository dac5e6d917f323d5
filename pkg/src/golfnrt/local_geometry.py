"""Epipolar feature aggregation guided by the global context feature.

Per ray: every sample is projected into every source view and the 1/4-scale
feature map is bilinearly sampled there.  A view transformer (per-sample
cross-attention over views, first queried by the ray's global feature) gives
local features; those are concatenated with the global feature, projected,
and mixed along the ray by a ray transformer with a readout token.  The
readout token's attention over samples doubles as a sampling distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import Camera, SamplePoints, project
from .global_context import fourier_features
from .numkernel import FeedForward, LayerNorm, Linear, MultiHeadAttention, ShapeError, check_finite

FEATURE_STRIDE = 4


@dataclass
class EpipolarFeatures:
    values: torch.Tensor     # B x S x N x C, zero where invalid
    validity: torch.Tensor   # B x S x N bool
    view_dirs: torch.Tensor  # B x S x N x 3 unit vectors, source camera center -> sample
    colors: torch.Tensor | None = None  # B x S x N x 3 source pixel colors, zero where invalid

    @property
    def fully_occluded(self) -> torch.Tensor:
        return ~self.validity.any(dim=-1)

    def select_views(self, idx: Sequence[int]) -> "EpipolarFeatures":
        idx = list(idx)
        colors = None if self.colors is None else self.colors[:, :, idx]
        return EpipolarFeatures(self.values[:, :, idx], self.validity[:, :, idx], self.view_dirs[:, :, idx], colors)


@dataclass
class RayFeature:
    vector: torch.Tensor             # B x C
    attention_weights: torch.Tensor  # B x S, head-averaged readout weights of the last block
    fully_occluded: torch.Tensor     # B x S bool


def bilinear(feature_map: torch.Tensor, coords: np.ndarray) -> torch.Tensor:
    """Sample ``h x w x C`` at continuous ``(row, col)`` lattice coordinates
    (node ``(i, j)`` sits at integer coordinates).  Coordinates are clamped to
    the map."""
    h, w, C = feature_map.shape
    r = np.clip(coords[..., 0], 0.0, h - 1.0)
    c = np.clip(coords[..., 1], 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = torch.as_tensor(r - r0, dtype=feature_map.dtype).unsqueeze(-1)
    fc = torch.as_tensor(c - c0, dtype=feature_map.dtype).unsqueeze(-1)
    flat = feature_map.reshape(h * w, C)

    def at(rr, cc):
        return flat[torch.as_tensor(rr * w + cc)]

    top = at(r0, c0) * (1 - fc) + at(r0, c1) * fc
    bottom = at(r1, c0) * (1 - fc) + at(r1, c1) * fc
    return top * (1 - fr) + bottom * fr


def gather_epipolar(samples: SamplePoints, features_quarter: torch.Tensor,
                    cameras: Sequence[Camera], stride: int = FEATURE_STRIDE,
                    images: torch.Tensor | None = None) -> EpipolarFeatures:
    """Project every sample into every source view and read the feature map
    at ``pixel / stride``.  Samples outside a view's frustum (or padded
    sample slots) get zero features and ``validity=False``.  With ``images``
    (N x H x W x 3) the source colors at the projected pixels are read too
    (pixel centers sit at half-integer coordinates)."""
    N = features_quarter.shape[0]
    if len(cameras) != N:
        raise ShapeError(f"{N} feature maps but {len(cameras)} cameras")
    B, S = samples.depths.shape
    values, valid, dirs, colors = [], [], [], []
    for n, cam in enumerate(cameras):
        pixels, _, inside = project(cam, samples.positions)
        inside = inside & samples.valid
        f = bilinear(features_quarter[n], pixels / stride)
        m = torch.as_tensor(inside)
        values.append(torch.where(m.unsqueeze(-1), f, torch.zeros_like(f)))
        valid.append(m)
        if images is not None:
            rgb = bilinear(images[n], pixels - 0.5)
            colors.append(torch.where(m.unsqueeze(-1), rgb, torch.zeros_like(rgb)))
        d = samples.positions - cam.center
        d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
        dirs.append(torch.as_tensor(d, dtype=features_quarter.dtype))
    return EpipolarFeatures(torch.stack(values, 2), torch.stack(valid, 2), torch.stack(dirs, 2),
                            torch.stack(colors, 2) if colors else None)


def relative_directions(target_dirs: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
    """``B x 3`` target directions and ``B x S x N x 3`` source directions ->
    ``B x S x N x 4`` (difference vector and cosine)."""
    t = target_dirs[:, None, None, :].expand_as(view_dirs)
    return torch.cat([t - view_dirs, (t * view_dirs).sum(-1, keepdim=True)], dim=-1)


class ViewTransformer(nn.Module):
    """Per-sample cross-attention from the sample token to its source-view features."""

    def __init__(self, width: int, heads: int, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.norm_q = LayerNorm(width)
        self.norm_kv = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, sequential_keys=True, generator=generator)
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio * width, generator=generator)

    def forward(self, query: torch.Tensor, view_tokens: torch.Tensor, validity: torch.Tensor,
                return_weights: bool = False):
        """``query`` B x S x C; ``view_tokens`` B x S x N x C; ``validity`` B x S x N."""
        if query.shape[-1] != view_tokens.shape[-1]:
            raise ShapeError("query and view features differ in width")
        q = query.unsqueeze(-2)
        out, w = self.attn(self.norm_q(q), self.norm_kv(view_tokens), mask=validity.unsqueeze(-2))
        h = q + out
        h = (h + self.ffn(self.norm_ffn(h))).squeeze(-2)
        occluded = ~validity.any(dim=-1, keepdim=True)
        h = torch.where(occluded, torch.zeros_like(h), h)
        h = check_finite(h, "view transformer")
        return (h, w[..., 0, :]) if return_weights else h


class GlobalLocalFusion(nn.Module):
    """Concatenate the ray's global feature to each sample's local feature and project back to C."""

    def __init__(self, width: int, generator=None):
        super().__init__()
        self.width = width
        self.proj = Linear(2 * width, width, generator=generator)

    @staticmethod
    def concat(global_feature: torch.Tensor, local: torch.Tensor) -> torch.Tensor:
        g = global_feature.unsqueeze(-2).expand_as(local)
        return torch.cat([g, local], dim=-1)

    def forward(self, global_feature: torch.Tensor, local: torch.Tensor) -> torch.Tensor:
        if global_feature.shape[-1] != local.shape[-1]:
            raise ShapeError("global and local features differ in width")
        return self.proj(self.concat(global_feature, local))

    def identity_blocks_(self) -> None:
        """Set the projection to ``[I | I]`` so the output is ``F_g + F_l``."""
        eye = torch.eye(self.width, dtype=self.proj.weight.dtype)
        with torch.no_grad():
            self.proj.weight.copy_(torch.cat([eye, eye], dim=1))
            self.proj.bias.zero_()


class RayTransformer(nn.Module):
    """Self-attention along a ray's samples plus a readout token at position 0."""

    def __init__(self, width: int, heads: int, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.norm_attn = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, generator=generator)
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio * width, generator=generator)

    def forward(self, tokens: torch.Tensor, readout: torch.Tensor,
                sample_valid: torch.Tensor | None = None):
        """``tokens`` B x S x C, ``readout`` B x C.  Returns updated tokens,
        updated readout and the readout's head-averaged weights over samples
        (self-weight removed, renormalized to sum 1)."""
        B, S, _ = tokens.shape
        seq = torch.cat([readout.unsqueeze(1), tokens], dim=1)
        mask = None
        if sample_valid is not None:
            keep = torch.cat([torch.ones(B, 1, dtype=torch.bool), sample_valid], dim=1)
            mask = keep.unsqueeze(1)
        out, w = self.attn(self.norm_attn(seq), mask=mask, need_weights=1)
        h = seq + out
        h = h + self.ffn(self.norm_ffn(h))
        h = check_finite(h, "ray transformer")
        weights = w[:, :, 0, 1:].mean(dim=1)
        weights = weights / weights.sum(dim=-1, keepdim=True)
        return h[:, 1:], h[:, 0], weights


class LocalGeometry(nn.Module):
    """Alternating view / fuse / ray blocks producing the final ray feature."""

    def __init__(self, width: int, heads: int, blocks: int = 4, ffn_ratio: int = 2,
                 depth_octaves: int = 6, requery_views: bool = True, photo_consistency: bool = False,
                 generator=None):
        super().__init__()
        if blocks < 1:
            raise ValueError("need at least one view/ray block")
        self.width = width
        self.depth_octaves = depth_octaves
        self.requery_views = requery_views
        self.depth_embed = Linear(2 * depth_octaves, width, generator=generator)
        self.dir_embed = Linear(4, width, generator=generator)
        self.color_embed = Linear(3, width, generator=generator)
        # mean and variance of source colors across valid views, plus the valid share
        self.consistency_embed = Linear(7, width, generator=generator) if photo_consistency else None
        self.readout = nn.Parameter(torch.randn(width, generator=generator, dtype=torch.float64))
        self.view_blocks = nn.ModuleList(ViewTransformer(width, heads, ffn_ratio, generator) for _ in range(blocks))
        self.fusions = nn.ModuleList(GlobalLocalFusion(width, generator) for _ in range(blocks))
        self.ray_blocks = nn.ModuleList(RayTransformer(width, heads, ffn_ratio, generator) for _ in range(blocks))

    def depth_encoding(self, normalized_depths: torch.Tensor) -> torch.Tensor:
        return self.depth_embed(fourier_features(normalized_depths.unsqueeze(-1), self.depth_octaves))

    def view_tokens(self, epi: EpipolarFeatures, target_dirs: torch.Tensor) -> torch.Tensor:
        tokens = epi.values + self.dir_embed(relative_directions(target_dirs, epi.view_dirs))
        if epi.colors is not None:
            tokens = tokens + self.color_embed(epi.colors)
        return tokens

    @staticmethod
    def color_statistics(epi: EpipolarFeatures) -> torch.Tensor:
        """Per-sample ``[mean rgb, variance rgb, valid share]`` over source views."""
        valid = epi.validity.unsqueeze(-1).to(epi.colors.dtype)
        count = valid.sum(-2)
        denom = count.clamp(min=1.0)
        mean = (epi.colors * valid).sum(-2) / denom
        var = (((epi.colors - mean.unsqueeze(-2)) ** 2) * valid).sum(-2) / denom
        return torch.cat([mean, var, count / epi.validity.shape[-1]], -1)

    def forward(self, global_feature: torch.Tensor, epi: EpipolarFeatures, normalized_depths: torch.Tensor,
                target_dirs: torch.Tensor, sample_valid: torch.Tensor | None = None) -> RayFeature:
        B = global_feature.shape[0]
        kv = self.view_tokens(epi, target_dirs)
        tokens = global_feature.unsqueeze(1) + self.depth_encoding(normalized_depths)
        if self.consistency_embed is not None and epi.colors is not None:
            tokens = tokens + self.consistency_embed(self.color_statistics(epi))
        readout = self.readout.unsqueeze(0).expand(B, -1)
        local = None
        weights = None
        for i, (view, fuse, ray) in enumerate(zip(self.view_blocks, self.fusions, self.ray_blocks)):
            if i == 0 or self.requery_views:
                local = view(tokens, kv, epi.validity)
            tokens, readout, weights = ray(fuse(global_feature, local), readout, sample_valid)
        return RayFeature(readout, weights, epi.fully_occluded)
