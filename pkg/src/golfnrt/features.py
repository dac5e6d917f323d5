"""Shared-weight FPN-lite: 1/4, 1/8 and 1/16 resolution feature maps per view."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numkernel import DEFAULT_DTYPE, ShapeError, check_finite

MIN_SIZE = 16


class Conv2d(nn.Module):
    """Convolution with reflection padding (replicate on maps too small to reflect)."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, bias: bool = True,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        bound = math.sqrt(6.0 / ((cin + cout) * kernel * kernel))
        w = torch.empty(cout, cin, kernel, kernel, dtype=DEFAULT_DTYPE).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pad = self.kernel // 2
        if pad:
            mode = "reflect" if min(x.shape[-2:]) > pad else "replicate"
            x = F.pad(x, (pad, pad, pad, pad), mode=mode)
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


@dataclass
class FeaturePyramid:
    """Per-view feature maps, each ``N x h x w x C``."""

    quarter: torch.Tensor
    eighth: torch.Tensor
    sixteenth: torch.Tensor

    def view(self, i: int) -> "FeaturePyramid":
        return FeaturePyramid(self.quarter[i:i + 1], self.eighth[i:i + 1], self.sixteenth[i:i + 1])

    def select(self, idx) -> "FeaturePyramid":
        return FeaturePyramid(self.quarter[idx], self.eighth[idx], self.sixteenth[idx])


class FeatureExtractor(nn.Module):
    """Bottom-up stride-2 stages to 1/16, then a top-down pathway with 1x1
    lateral merges and nearest-neighbour upsample-add, and a 3x3 output head
    per level.  The 1/16 level is produced but the renderer does not read it."""

    def __init__(self, width: int = 32, bias: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        half = max(width // 2, 1)
        self.width = width
        self.stem = Conv2d(3, half, 3, 2, bias, generator)
        self.down4 = Conv2d(half, width, 3, 2, bias, generator)
        self.down8 = Conv2d(width, width, 3, 2, bias, generator)
        self.down16 = Conv2d(width, width, 3, 2, bias, generator)
        self.lat4 = Conv2d(width, width, 1, 1, bias, generator)
        self.lat8 = Conv2d(width, width, 1, 1, bias, generator)
        self.lat16 = Conv2d(width, width, 1, 1, bias, generator)
        self.head4 = Conv2d(width, width, 3, 1, bias, generator)
        self.head8 = Conv2d(width, width, 3, 1, bias, generator)
        self.head16 = Conv2d(width, width, 3, 1, bias, generator)

    def bottom_up(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        c2 = torch.relu(self.stem(x))
        c4 = torch.relu(self.down4(c2))
        c8 = torch.relu(self.down8(c4))
        c16 = torch.relu(self.down16(c8))
        return c4, c8, c16

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        """``images``: ``N x H x W x 3`` (or a single ``H x W x 3``) in [0, 1]."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected N x H x W x 3 images, got {tuple(images.shape)}")
        N, H, W, _ = images.shape
        if H < MIN_SIZE or W < MIN_SIZE:
            raise ShapeError(f"images must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")
        x = images.permute(0, 3, 1, 2).to(self.stem.weight.dtype)
        Hp, Wp = -(-H // 16) * 16, -(-W // 16) * 16
        if (Hp, Wp) != (H, W):
            x = F.pad(x, (0, Wp - W, 0, Hp - H), mode="reflect")

        c4, c8, c16 = self.bottom_up(x)
        p16 = self.lat16(c16)
        p8 = self.lat8(c8) + F.interpolate(p16, scale_factor=2, mode="nearest")
        p4 = self.lat4(c4) + F.interpolate(p8, scale_factor=2, mode="nearest")
        out = []
        for head, p, s in ((self.head4, p4, 4), (self.head8, p8, 8), (self.head16, p16, 16)):
            f = head(p)[:, :, : -(-H // s), : -(-W // s)]
            out.append(check_finite(f.permute(0, 2, 3, 1).contiguous(), "feature pyramid"))
        return FeaturePyramid(*out)


def extract(image: torch.Tensor, extractor: FeatureExtractor) -> FeaturePyramid:
    return extractor(image)
