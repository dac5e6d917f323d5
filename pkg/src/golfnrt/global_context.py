"""Scene encoding from 1/8-scale features and per-ray global context decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import Camera
from .numkernel import FeedForward, LayerNorm, Linear, MultiHeadAttention, ShapeError, check_finite
from .sparse_attention import EncoderBlock, pad_to_multiple


def fourier_features(v: torch.Tensor, octaves: int) -> torch.Tensor:
    """``[sin(a), cos(a)]`` with ``a = (pi v, 2 pi v, ..., 2^(F-1) pi v)``
    stacked frequency-major along the last axis: ``(..., D) -> (..., 2 D F)``."""
    args = torch.cat([(2.0 ** k) * math.pi * v for k in range(octaves)], dim=-1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def camera_vector(camera: Camera) -> np.ndarray:
    """16 numbers describing a camera: the 3x4 world-to-camera block and the
    intrinsics normalized by image size."""
    K = camera.intrinsics
    h, w = camera.image_size
    intr = [K[0, 0] / w, K[1, 1] / h, K[0, 2] / w, K[1, 2] / h]
    return np.concatenate([camera.world_to_camera[:3, :4].reshape(-1), intr])


@dataclass
class SceneRepresentation:
    tokens: torch.Tensor  # T x C
    source_view_count: int
    grid: tuple[int, int]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


class RayEmbedder(nn.Module):
    def __init__(self, width: int, octaves: int = 6, generator=None):
        super().__init__()
        self.octaves = octaves
        self.proj = Linear(2 * 2 * 3 * octaves, width, generator=generator)

    def features(self, origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return torch.cat([fourier_features(origins, self.octaves), fourier_features(directions, self.octaves)], -1)

    def forward(self, origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(origins, directions))


class SceneEncoder(nn.Module):
    """Adds positional and per-view pose embeddings to 1/8-scale features and
    runs the sparse encoder blocks.  Grids that P or G do not divide are
    zero-padded with the padding excluded from attention, then cropped."""

    def __init__(self, width: int, heads: int, blocks: int, block_size: int, grid_size: int,
                 ffn_ratio: int = 2, pos_octaves: int = 4, generator=None):
        super().__init__()
        self.block_size = block_size
        self.grid_size = grid_size
        self.pos_octaves = pos_octaves
        self.pos_embed = Linear(2 * 2 * pos_octaves, width, generator=generator)
        self.pose_embed = Linear(16, width, generator=generator)
        self.blocks = nn.ModuleList(
            EncoderBlock(width, heads, block_size, grid_size, ffn_ratio, generator) for _ in range(blocks)
        )

    def embeddings(self, h: int, w: int, cameras: Sequence[Camera]) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = self.pos_embed.weight.dtype
        rows = (torch.arange(h, dtype=dtype) + 0.5) / h
        cols = (torch.arange(w, dtype=dtype) + 0.5) / w
        coords = torch.stack(torch.meshgrid(rows, cols, indexing="ij"), dim=-1)
        pos = self.pos_embed(fourier_features(coords, self.pos_octaves))
        cams = torch.as_tensor(np.stack([camera_vector(c) for c in cameras]), dtype=dtype)
        pose = self.pose_embed(cams)
        return pos, pose

    def forward(self, features: torch.Tensor, cameras: Sequence[Camera]) -> SceneRepresentation:
        if features.dim() != 4:
            raise ShapeError(f"expected N x h x w x C features, got {tuple(features.shape)}")
        N, h, w, C = features.shape
        if len(cameras) != N:
            raise ShapeError(f"{N} feature maps but {len(cameras)} cameras")
        pos, pose = self.embeddings(h, w, cameras)
        x = features + pos.unsqueeze(0) + pose[:, None, None, :]
        multiple = math.lcm(self.block_size, self.grid_size)
        x, valid = pad_to_multiple(x, multiple)
        mask = None if bool(valid.all()) else valid
        for block in self.blocks:
            x = block(x, mask)
        x = x[:, :h, :w]
        return SceneRepresentation(x.reshape(N * h * w, C), N, (h, w))

    def zero_init_outputs(self) -> None:
        for block in self.blocks:
            block.zero_init_outputs()


class DecoderLayer(nn.Module):
    def __init__(self, width: int, heads: int, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.norm_q = LayerNorm(width)
        self.norm_kv = LayerNorm(width)
        self.cross = MultiHeadAttention(width, heads, generator=generator)
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_ratio * width, generator=generator)

    def forward(self, q: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # q: B x 1 x C, tokens: T x C shared by every ray
        kv = self.norm_kv(tokens).unsqueeze(0).expand(q.shape[0], -1, -1)
        out, w = self.cross(self.norm_q(q), kv)
        q = q + out
        q = q + self.ffn(self.norm_ffn(q))
        return q, w


class GlobalDecoder(nn.Module):
    """Cross-attention stack: the ray embedding queries the scene tokens."""

    def __init__(self, width: int, heads: int, layers: int = 2, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.width = width
        self.layers = nn.ModuleList(DecoderLayer(width, heads, ffn_ratio, generator) for _ in range(layers))

    def forward(self, ray_embedding: torch.Tensor, scene: SceneRepresentation,
                return_weights: bool = False):
        if ray_embedding.shape[-1] != self.width or scene.width != self.width:
            raise ShapeError(f"decoder width {self.width}, ray {ray_embedding.shape[-1]}, scene {scene.width}")
        q = ray_embedding.reshape(-1, 1, self.width)
        weights = []
        for layer in self.layers:
            q, w = layer(q, scene.tokens)
            weights.append(w)
        out = check_finite(q[:, 0], "global decoder")
        return (out, weights) if return_weights else out


class GlobalContext(nn.Module):
    """Bundles the scene encoder, ray embedder and decoder."""

    def __init__(self, width: int, heads: int, encoder_blocks: int, decoder_layers: int,
                 block_size: int, grid_size: int, octaves: int = 6, ffn_ratio: int = 2, generator=None):
        super().__init__()
        self.encoder = SceneEncoder(width, heads, encoder_blocks, block_size, grid_size, ffn_ratio,
                                    generator=generator)
        self.ray_embedder = RayEmbedder(width, octaves, generator)
        self.decoder = GlobalDecoder(width, heads, decoder_layers, ffn_ratio, generator)

    def encode_scene(self, features_eighth: torch.Tensor, cameras: Sequence[Camera]) -> SceneRepresentation:
        return self.encoder(features_eighth, cameras)

    def embed_ray(self, origins: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return self.ray_embedder(origins, directions)

    def decode_global(self, ray_embedding: torch.Tensor, scene: SceneRepresentation) -> torch.Tensor:
        return self.decoder(ray_embedding, scene)

    def forward(self, origins: torch.Tensor, directions: torch.Tensor, scene: SceneRepresentation) -> torch.Tensor:
        return self.decode_global(self.embed_ray(origins, directions), scene)
