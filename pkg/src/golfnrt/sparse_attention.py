"""Multi-axis sparse attention over a stack of per-view feature maps.

All operations take ``x`` of shape ``N x H x W x C`` (N source views).

* block attention: self-attention inside each non-overlapping ``P x P`` window;
* grid attention: the map is cut into a ``G x G`` grid of cells of size
  ``(H/G) x (W/G)``; tokens that sit at the same offset inside their cell form
  one group of ``G*G`` tokens at stride ``H/G`` (dilated, MaxViT-style);
* inter-view attention: at every pixel, attention across the N views.

Stacking the three with residual feed-forward sub-layers gives one encoder
block whose attention cost grows linearly with ``H*W`` for fixed P and G.
"""

from __future__ import annotations

import copy
import io
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .numkernel import (
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
    ShapeError,
    check_finite,
)


def _check_grid(x: torch.Tensor, size: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected N x H x W x C feature grid, got {tuple(x.shape)}")
    _, H, W, _ = x.shape
    if size <= 0 or H % size or W % size:
        raise ShapeError(f"{what} {size} does not divide the {H}x{W} feature map")


# ---------------------------------------------------------------------------
# Partitions (pure index shuffles, exact inverses of each other)


def block_partition(x: torch.Tensor, P: int) -> torch.Tensor:
    """``N x H x W x C`` -> ``(N*H/P*W/P) x (P*P) x C`` windows."""
    N, H, W, C = x.shape
    x = x.reshape(N, H // P, P, W // P, P, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(N * (H // P) * (W // P), P * P, C)


def block_merge(windows: torch.Tensor, N: int, H: int, W: int, P: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.reshape(N, H // P, W // P, P, P, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(N, H, W, C)


def grid_partition(x: torch.Tensor, G: int) -> torch.Tensor:
    """``N x H x W x C`` -> ``(N*H/G*W/G) x (G*G) x C`` strided groups.

    Pixel ``(i*a + r, j*b + s)`` with cell size ``a = H/G, b = W/G`` lands in
    group ``(r, s)`` at token index ``i*G + j``.
    """
    N, H, W, C = x.shape
    a, b = H // G, W // G
    x = x.reshape(N, G, a, G, b, C).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(N * a * b, G * G, C)


def grid_merge(groups: torch.Tensor, N: int, H: int, W: int, G: int) -> torch.Tensor:
    C = groups.shape[-1]
    a, b = H // G, W // G
    x = groups.reshape(N, a, b, G, G, C).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(N, H, W, C)


def block_groups(H: int, W: int, P: int) -> list[list[int]]:
    """Flat pixel indices (r*W + c) of every block window."""
    idx = torch.arange(H * W).reshape(1, H, W, 1)
    return block_partition(idx, P).squeeze(-1).tolist()


def grid_groups(H: int, W: int, G: int) -> list[list[int]]:
    idx = torch.arange(H * W).reshape(1, H, W, 1)
    return grid_partition(idx, G).squeeze(-1).tolist()


def block_mask(H: int, W: int, P: int) -> torch.Tensor:
    """``HW x HW`` boolean: True when two pixels share a block window."""
    r = torch.arange(H).repeat_interleave(W)
    c = torch.arange(W).repeat(H)
    key = (r // P) * (W // P) + c // P
    return key[:, None] == key[None, :]


def grid_mask(H: int, W: int, G: int) -> torch.Tensor:
    """``HW x HW`` boolean: True when two pixels share a grid group."""
    a, b = H // G, W // G
    r = torch.arange(H).repeat_interleave(W)
    c = torch.arange(W).repeat(H)
    key = (r % a) * b + c % b
    return key[:, None] == key[None, :]


def _key_mask(valid_groups: torch.Tensor | None) -> torch.Tensor | None:
    # (groups, L) -> (groups, 1, L) broadcast over queries
    return None if valid_groups is None else valid_groups.unsqueeze(-2)


# ---------------------------------------------------------------------------
# Attention layers


class BlockAttention(nn.Module):
    def __init__(self, width: int, heads: int, block_size: int, generator=None):
        super().__init__()
        self.block_size = block_size
        self.attn = MultiHeadAttention(width, heads, generator=generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        _check_grid(x, self.block_size, "block size")
        N, H, W, _ = x.shape
        P = self.block_size
        tokens = block_partition(x, P)
        mask = None if valid is None else block_partition(valid.unsqueeze(-1), P).squeeze(-1)
        out, _ = self.attn(tokens, mask=_key_mask(mask), need_weights=False)
        return block_merge(out, N, H, W, P)


class GridAttention(nn.Module):
    def __init__(self, width: int, heads: int, grid_size: int, generator=None):
        super().__init__()
        self.grid_size = grid_size
        self.attn = MultiHeadAttention(width, heads, generator=generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        _check_grid(x, self.grid_size, "grid size")
        N, H, W, _ = x.shape
        G = self.grid_size
        tokens = grid_partition(x, G)
        mask = None if valid is None else grid_partition(valid.unsqueeze(-1), G).squeeze(-1)
        out, _ = self.attn(tokens, mask=_key_mask(mask), need_weights=False)
        return grid_merge(out, N, H, W, G)


class InterViewAttention(nn.Module):
    def __init__(self, width: int, heads: int, generator=None):
        super().__init__()
        self.attn = MultiHeadAttention(width, heads, generator=generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None,
                return_weights: bool = False):
        if x.dim() != 4 or x.shape[0] < 1:
            raise ShapeError(f"expected N x H x W x C with N >= 1, got {tuple(x.shape)}")
        N, H, W, C = x.shape
        tokens = x.permute(1, 2, 0, 3).reshape(H * W, N, C)
        mask = None if valid is None else valid.permute(1, 2, 0).reshape(H * W, N)
        out, w = self.attn(tokens, mask=_key_mask(mask))
        out = out.reshape(H, W, N, C).permute(2, 0, 1, 3)
        return (out, w) if return_weights else out


class _SubLayer(nn.Module):
    """Pre-norm residual attention followed by a pre-norm residual feed-forward."""

    def __init__(self, attn: nn.Module, width: int, ffn_hidden: int, generator=None):
        super().__init__()
        self.norm_attn = LayerNorm(width)
        self.attn = attn
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_hidden, generator=generator)

    def forward(self, x, valid=None):
        x = x + self.attn(self.norm_attn(x), valid)
        return x + self.ffn(self.norm_ffn(x))


class EncoderBlock(nn.Module):
    """Block -> grid -> inter-view attention, each with its own feed-forward."""

    def __init__(self, width: int, heads: int, block_size: int, grid_size: int,
                 ffn_ratio: int = 2, generator=None):
        super().__init__()
        hidden = ffn_ratio * width
        self.block = _SubLayer(BlockAttention(width, heads, block_size, generator), width, hidden, generator)
        self.grid = _SubLayer(GridAttention(width, heads, grid_size, generator), width, hidden, generator)
        self.view = _SubLayer(InterViewAttention(width, heads, generator), width, hidden, generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        x = self.block(x, valid)
        x = self.grid(x, valid)
        x = self.view(x, valid)
        return check_finite(x, "encoder block")

    def zero_init_outputs(self) -> None:
        for sub in (self.block, self.grid, self.view):
            sub.attn.attn.out_proj.zero_()
            sub.ffn.zero_output_()


class FullAttention(nn.Module):
    """Joint self-attention over all ``N*H*W`` tokens (the dense baseline)."""

    def __init__(self, width: int, heads: int, generator=None):
        super().__init__()
        self.attn = MultiHeadAttention(width, heads, generator=generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        N, H, W, C = x.shape
        tokens = x.reshape(1, N * H * W, C)
        mask = None if valid is None else valid.reshape(1, 1, N * H * W)
        out, _ = self.attn(tokens, mask=mask, need_weights=False)
        return out.reshape(N, H, W, C)


class FullAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.full = _SubLayer(FullAttention(width, heads, generator), width, ffn_ratio * width, generator)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        return check_finite(self.full(x, valid), "full attention block")


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad H and W of ``N x H x W x C`` up to ``multiple``; returns the
    padded grid and an ``N x Hp x Wp`` validity mask."""
    N, H, W, C = x.shape
    Hp = -(-H // multiple) * multiple
    Wp = -(-W // multiple) * multiple
    valid = torch.zeros(N, Hp, Wp, dtype=torch.bool, device=x.device)
    valid[:, :H, :W] = True
    if (Hp, Wp) == (H, W):
        return x, valid
    padded = x.new_zeros(N, Hp, Wp, C)
    padded[:, :H, :W] = x
    return padded, valid


# ---------------------------------------------------------------------------
# Cost model (1 multiply-add = 2 FLOPs)


@dataclass
class CostRow:
    stage: str
    flops: int
    parameters: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def parameters(self) -> int:
        return sum(r.parameters for r in self.rows)

    @property
    def score_flops(self) -> int:
        """FLOPs of the attention score and weighted-value products only."""
        return sum(r.flops for r in self.rows if r.stage.endswith(".scores"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,flops,parameters\n")
        for r in self.rows:
            buf.write(f"{r.stage},{r.flops},{r.parameters}\n")
        buf.write(f"total,{self.flops},{self.parameters}\n")
        return buf.getvalue()


def _attention_rows(name: str, tokens: int, group: int, C: int, hidden: int, blocks: int) -> list[CostRow]:
    lin = C * C + C
    rows = [
        CostRow(f"{name}.qkv", 2 * 3 * tokens * C * C, 3 * lin),
        # q k^T and weights @ v, each group-size multiply-adds per token and channel
        CostRow(f"{name}.scores", 2 * 2 * tokens * group * C, 0),
        CostRow(f"{name}.out", 2 * tokens * C * C, lin),
        CostRow(f"{name}.ffn", 2 * 2 * tokens * C * hidden, C * hidden + hidden + hidden * C + C),
        CostRow(f"{name}.norm", 0, 2 * 2 * C),
    ]
    for r in rows:
        r.flops *= blocks
        r.parameters *= blocks
    return rows


def cost_model(H: int, W: int, C: int, N: int, P: int, G: int, heads: int, blocks: int,
               ffn_ratio: int = 2) -> CostReport:
    if min(H, W, C, N, P, G, heads, blocks) <= 0:
        raise ValueError("cost model arguments must be positive")
    if H % P or W % P or H % G or W % G or C % heads:
        raise ValueError("cost model needs P and G to divide H and W and heads to divide C")
    T = N * H * W
    hidden = ffn_ratio * C
    rows = (_attention_rows("block_attn", T, P * P, C, hidden, blocks)
            + _attention_rows("grid_attn", T, G * G, C, hidden, blocks)
            + _attention_rows("view_attn", T, N, C, hidden, blocks))
    return CostReport(rows)


def cost_model_full(H: int, W: int, C: int, N: int, heads: int, blocks: int,
                    ffn_ratio: int = 2) -> CostReport:
    if min(H, W, C, N, heads, blocks) <= 0:
        raise ValueError("cost model arguments must be positive")
    if C % heads:
        raise ValueError("heads must divide C")
    T = N * H * W
    return CostReport(_attention_rows("full_attn", T, T, C, ffn_ratio * C, blocks))


def build_encoder(C: int, heads: int, P: int, G: int, blocks: int, ffn_ratio: int = 2,
                  seed: int = 0) -> nn.Sequential:
    gen = torch.Generator().manual_seed(seed)
    return nn.Sequential(*[EncoderBlock(C, heads, P, G, ffn_ratio, gen) for _ in range(blocks)])


def build_full_encoder(C: int, heads: int, blocks: int, ffn_ratio: int = 2, seed: int = 0) -> nn.Sequential:
    gen = torch.Generator().manual_seed(seed)
    return nn.Sequential(*[FullAttentionBlock(C, heads, ffn_ratio, gen) for _ in range(blocks)])


def measured_flops(encoder: nn.Module, N: int, H: int, W: int, C: int) -> int:
    """Instrumented count of one forward pass on shape-only (meta) tensors."""
    from .numkernel import count_flops

    meta = copy.deepcopy(encoder).to("meta")
    x = torch.empty(N, H, W, C, device="meta", dtype=torch.float64)
    return count_flops(lambda: meta(x))
