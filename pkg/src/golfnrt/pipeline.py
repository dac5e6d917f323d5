"""End-to-end renderer: features -> global context -> two-stage sampling ->
view/ray blocks -> MLP color."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .adaptive_sampling import SamplePdf, TwoStageResult, ray_streams, two_stage_sample
from .features import FeatureExtractor, FeaturePyramid
from .geometry import Camera, RayBundle, SamplePoints, generate_rays, pixel_centers
from .global_context import GlobalContext, SceneRepresentation
from .local_geometry import LocalGeometry, RayFeature, gather_epipolar
from .numkernel import MLP, check_finite

log = logging.getLogger(__name__)

# stream tags for per-ray random generators
_COARSE, _FINE = 1, 2


@dataclass
class ModelConfig:
    embed_width: int = 32
    heads: int = 4
    encoder_blocks: int = 2
    decoder_layers: int = 2
    vl_blocks: int = 4
    n_coarse: int = 32
    n_fine: int = 16
    bandwidth_factor: float = 1.5
    fourier_octaves: int = 6
    block_size: int = 2
    grid_size: int = 2
    seed: int = 0
    ffn_ratio: int = 2
    depth_octaves: int = 6
    pdf_grid_factor: int = 4
    requery_views: bool = True
    supervise_coarse: bool = False
    photo_consistency: bool = False
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    precision: str = "float64"

    def __post_init__(self):
        ints = ("embed_width", "heads", "encoder_blocks", "decoder_layers", "vl_blocks", "n_coarse",
                "fourier_octaves", "block_size", "grid_size", "ffn_ratio", "depth_octaves", "pdf_grid_factor")
        for name in ints:
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_fine < 0 or self.bandwidth_factor <= 0:
            raise ValueError("n_fine must be >= 0 and bandwidth_factor > 0")
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be at least 2")
        if self.embed_width % self.heads:
            raise ValueError("embed_width must be divisible by heads")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision is float64 or float32")
        self.background = tuple(float(c) for c in self.background)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        base = dict(embed_width=64, vl_blocks=8, n_coarse=128, n_fine=64, block_size=8, grid_size=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


PROFILES = {"micro": ModelConfig.micro, "large": ModelConfig.large}


def read_config_file(path: str | Path) -> dict:
    """Flat key/value config from ``.json`` or TOML (``key = value`` lines)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    data = tomllib.loads(text)
    flat: dict = {}
    for k, v in data.items():
        if isinstance(v, dict):  # optional [model] / [train] tables
            flat.update(v)
        else:
            flat[k] = v
    return flat


def split_config(values: dict, *targets) -> list[dict]:
    """Distribute flat keys over dataclass types; unknown keys are an error."""
    out = [dict() for _ in targets]
    for key, value in values.items():
        for i, t in enumerate(targets):
            if key in {f.name for f in fields(t)}:
                out[i][key] = value
                break
        else:
            raise KeyError(f"unknown config key {key!r}")
    return out


class GolfNRT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        C = config.embed_width
        gen = torch.Generator().manual_seed(config.seed)
        self.features = FeatureExtractor(C, generator=gen)
        self.context = GlobalContext(C, config.heads, config.encoder_blocks, config.decoder_layers,
                                     config.block_size, config.grid_size, config.fourier_octaves,
                                     config.ffn_ratio, generator=gen)
        self.local = LocalGeometry(C, config.heads, config.vl_blocks, config.ffn_ratio,
                                   config.depth_octaves, config.requery_views, config.photo_consistency,
                                   generator=gen)
        self.color = MLP([C, 2 * C, 2 * C, 3], generator=gen)
        self.to(config.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.color.layers[0].weight.dtype

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(feature extractor parameters, everything else)."""
        feats = list(self.features.parameters())
        ids = {id(p) for p in feats}
        return feats, [p for p in self.parameters() if id(p) not in ids]

    def decode_color(self, feature: torch.Tensor) -> torch.Tensor:
        # logistic sigmoid written through tanh: torch.sigmoid rounds differently
        # in its vectorized and scalar paths, which breaks batch invariance
        return 0.5 * torch.tanh(0.5 * self.color(feature)) + 0.5


@dataclass
class SceneState:
    """Everything about the source views that rendering reads."""

    pyramid: FeaturePyramid
    cameras: list[Camera]
    scene: SceneRepresentation
    images: torch.Tensor  # N x H x W x 3 source colors


def prepare_scene(model: GolfNRT, images, cameras: Sequence[Camera]) -> SceneState:
    images = torch.as_tensor(np.asarray(images), dtype=model.dtype)
    pyramid = model.features(images)
    scene = model.context.encode_scene(pyramid.eighth, cameras)
    return SceneState(pyramid, list(cameras), scene, images)


@dataclass
class RenderOutput:
    color: torch.Tensor            # B x 3, decoder output (unclamped)
    weights: torch.Tensor          # B x S final-stage readout weights
    depths: np.ndarray             # B x S final-stage sample depths
    valid: np.ndarray              # B x S
    expected_depth: np.ndarray     # B
    covered: np.ndarray            # B; False -> no sample saw any source view
    coarse_depths: np.ndarray
    coarse_weights: np.ndarray
    fine_depths: np.ndarray
    pdf: SamplePdf | None
    coarse_color: torch.Tensor | None = None


def render_rays(model: GolfNRT, state: SceneState, rays: RayBundle, *, training: bool = False,
                seed: int = 0, step: int = 0, ray_ids: Sequence[int] | None = None,
                fine_depths: np.ndarray | None = None) -> RenderOutput:
    """Render a batch of rays.  In training mode coarse depths are jittered and
    refined depths drawn stratified, from per-ray generators keyed by
    ``(seed, step, ray id)``; evaluation is fully deterministic.
    ``fine_depths`` (B x N_f) pins the refined depths."""
    cfg = model.config
    dtype = model.dtype
    B = len(rays)
    ray_ids = list(range(B)) if ray_ids is None else list(ray_ids)
    origins = torch.tensor(rays.origins, dtype=dtype)
    dirs = torch.tensor(rays.directions, dtype=dtype)
    global_feature = model.context(origins, dirs, state.scene)

    def run(samples: SamplePoints, with_grad: bool) -> RayFeature:
        with torch.set_grad_enabled(with_grad and torch.is_grad_enabled()):
            epi = gather_epipolar(samples, state.pyramid.quarter, state.cameras, images=state.images)
            t = (samples.depths - rays.near[:, None]) / (rays.far - rays.near)[:, None]
            sample_valid = None if samples.valid.all() else torch.as_tensor(samples.valid)
            return model.local(global_feature, epi, torch.as_tensor(t, dtype=dtype), dirs, sample_valid)

    coarse_rngs = fine_rngs = None
    if training:
        coarse_rngs = [np.random.default_rng([seed, step, i, _COARSE]) for i in ray_ids]
        fine_rngs = [np.random.default_rng([seed, step, i, _FINE]) for i in ray_ids]
    res: TwoStageResult = two_stage_sample(
        rays, run, lambda f: f.attention_weights.detach().cpu().numpy(), cfg.n_coarse, cfg.n_fine,
        bandwidth_factor=cfg.bandwidth_factor, grid_factor=cfg.pdf_grid_factor, jitter=training,
        coarse_rngs=coarse_rngs, fine_rngs=fine_rngs, coarse_grad=training and cfg.supervise_coarse,
        fine_depths=fine_depths,
    )
    feature: RayFeature = res.feature
    color = model.decode_color(feature.vector)
    covered = ~feature.fully_occluded.all(dim=-1)
    background = torch.as_tensor(cfg.background, dtype=dtype).expand_as(color)
    color = check_finite(torch.where(covered.unsqueeze(-1), color, background), "color decoder")
    coarse_color = None
    if training and cfg.supervise_coarse:
        coarse_color = model.decode_color(res.coarse_feature.vector)

    w = feature.attention_weights.detach().cpu().numpy()
    depths = res.samples.depths
    return RenderOutput(
        color=color,
        weights=feature.attention_weights,
        depths=depths,
        valid=res.samples.valid,
        expected_depth=(w * depths).sum(-1),
        covered=covered.cpu().numpy(),
        coarse_depths=res.coarse.depths,
        coarse_weights=res.coarse_feature.attention_weights.detach().cpu().numpy(),
        fine_depths=res.fine_depths,
        pdf=res.pdf,
        coarse_color=coarse_color,
    )


def render_ray(model: GolfNRT, state: SceneState, origin, direction, near: float, far: float) -> RenderOutput:
    rays = RayBundle(np.asarray(origin)[None], np.asarray(direction)[None], near, far)
    with torch.no_grad():
        return render_rays(model, state, rays)


@dataclass
class RenderedImage:
    image: np.ndarray           # H x W x 3, clamped to [0, 1]
    raw: np.ndarray             # H x W x 3, decoder output
    depth: np.ndarray           # H x W expected depth
    weight_sum: np.ndarray      # H x W, sum of readout weights (1 by construction)
    covered: np.ndarray         # H x W


def render_image(model: GolfNRT, camera: Camera, state: SceneState, chunk_size: int = 1024) -> RenderedImage:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    h, w = camera.image_size
    rays = generate_rays(camera, pixel_centers(camera))
    colors, depth, wsum, covered = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(rays), chunk_size):
            out = render_rays(model, state, rays[start:start + chunk_size])
            colors.append(out.color.cpu().numpy())
            depth.append(out.expected_depth)
            wsum.append(out.weights.sum(-1).cpu().numpy())
            covered.append(out.covered)
    raw = np.concatenate(colors).reshape(h, w, 3).astype(np.float64)
    return RenderedImage(
        image=np.clip(raw, 0.0, 1.0),
        raw=raw,
        depth=np.concatenate(depth).reshape(h, w),
        weight_sum=np.concatenate(wsum).reshape(h, w),
        covered=np.concatenate(covered).reshape(h, w),
    )


def view_distances(target: Camera, cameras: Sequence[Camera]) -> np.ndarray:
    """Angle between optical axes (radians) plus camera-center distance
    normalized by the largest center distance among the candidates."""
    axes = np.stack([c.optical_axis for c in cameras])
    angle = np.arccos(np.clip(axes @ target.optical_axis, -1.0, 1.0))
    dist = np.linalg.norm(np.stack([c.center for c in cameras]) - target.center, axis=1)
    scale = dist.max()
    return angle + (dist / scale if scale > 0 else dist)


def select_source_views(target: Camera, cameras: Sequence[Camera], count: int, pool_factor: float = 1.0,
                        rng: np.random.Generator | None = None, training: bool = False) -> list[int]:
    """Rank candidates by :func:`view_distances`; evaluation takes the top
    ``count``, training draws ``count`` uniformly from the top
    ``round(pool_factor * count)``.  Returned in ranking order."""
    if len(cameras) < count:
        log.warning("only %d candidate views for %d requested; using all", len(cameras), count)
        count = len(cameras)
    order = np.argsort(view_distances(target, cameras), kind="stable")
    if not training:
        return [int(i) for i in order[:count]]
    pool = order[: min(len(order), max(count, int(round(pool_factor * count))))]
    rng = rng if rng is not None else np.random.default_rng()
    picked = np.sort(rng.choice(len(pool), count, replace=False))
    return [int(pool[i]) for i in picked]
