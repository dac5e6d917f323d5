"""Per-scene MSE training with Adam and exponential learning-rate decay,
plus held-out evaluation helpers."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..geometry import generate_rays, pixel_centers
from ..numkernel import NonFiniteError, load_parameters, save_parameters
from ..pipeline import GolfNRT, ModelConfig, SceneState, prepare_scene, render_image, render_rays, select_source_views
from .metrics import psnr, ssim
from .scene import SyntheticScene

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    rays_per_step: int = 256
    lr_features: float = 1e-3
    lr_other: float = 5e-4
    decay_rate: float = 0.1
    decay_steps: int | None = None  # None: decay by ``decay_rate`` over the whole run
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    source_views: int = 3
    pool_factor: float = 1.0
    train_seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.rays_per_step < 1 or self.source_views < 1:
            raise ValueError("steps >= 0, rays_per_step >= 1 and source_views >= 1 required")
        if self.lr_features <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")

    @property
    def horizon(self) -> int:
        return max(1, self.decay_steps if self.decay_steps is not None else self.steps)

    def learning_rates(self, step: int) -> tuple[float, float]:
        f = self.decay_rate ** (step / self.horizon)
        return self.lr_features * f, self.lr_other * f


@dataclass
class TrainState:
    step: int
    lr_features: float
    lr_other: float
    decay_rate: float
    seed: int
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, mse, psnr)
    lr_history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([h[1] for h in self.history])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mse", "psnr"])
            for step, err, p in self.history:
                w.writerow([step, repr(err), repr(p)])
        return path

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"loss became non-finite at step {step}; last good parameters in {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


def save_checkpoint(model: GolfNRT, path: str | Path, state: TrainState | None = None) -> Path:
    """Parameters in the binary checkpoint format plus a JSON sidecar with the
    model config (and training state when given)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_parameters(model, path)
    meta = {"model": model.config.to_dict()}
    if state is not None:
        meta["train"] = state.to_dict()
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))
    return path


def load_checkpoint(path: str | Path, **overrides) -> GolfNRT:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    cfg = meta["model"]
    cfg.update(overrides)
    model = GolfNRT(ModelConfig(**cfg))
    load_parameters(model, path)
    return model


def source_views_for(scene: SyntheticScene, target: int, count: int, pool_factor: float = 1.0,
                     rng: np.random.Generator | None = None, training: bool = False) -> list[int]:
    """Cameras marked ``source`` when the scene has them, otherwise the
    closest other cameras."""
    fixed = scene.source_indices
    if fixed:
        return fixed
    others = [i for i in range(len(scene.cameras)) if i != target]
    picked = select_source_views(scene.cameras[target], [scene.cameras[i] for i in others], count,
                                 pool_factor, rng, training)
    return [others[i] for i in picked]


def scene_state(model: GolfNRT, scene: SyntheticScene, sources: list[int]) -> SceneState:
    return prepare_scene(model, np.stack([scene.images[i] for i in sources]), [scene.cameras[i] for i in sources])


def _snapshot(model: GolfNRT) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model: GolfNRT, scene: SyntheticScene, config: TrainConfig, *, checkpoint: str | Path | None = None,
          metrics_csv: str | Path | None = None,
          callback: Callable[[int, TrainState], None] | None = None) -> TrainState:
    """Run ``config.steps`` optimizer steps.  Each step picks a training
    camera and a ray batch, renders it and takes an Adam step on the MSE.
    Randomness comes from generators keyed by ``(train_seed, step)``."""
    targets = scene.train_indices or [i for i in range(len(scene.cameras)) if i not in scene.test_indices]
    if len(scene.cameras) < config.source_views + 1 or not targets:
        raise ValueError("scene needs at least source_views + 1 cameras and a training target")
    lr_f, lr_o = config.learning_rates(0)
    state = TrainState(0, lr_f, lr_o, config.decay_rate, config.train_seed)
    feats, others = model.parameter_groups()
    opt = torch.optim.Adam([{"params": feats, "lr": lr_f}, {"params": others, "lr": lr_o}],
                           betas=(config.beta1, config.beta2), eps=config.eps)
    last_good = _snapshot(model)
    dtype = model.dtype
    for step in range(config.steps):
        rng = np.random.default_rng([config.train_seed, step])
        target = targets[int(rng.integers(len(targets)))]
        cam = scene.cameras[target]
        sources = source_views_for(scene, target, config.source_views, config.pool_factor, rng, training=True)
        h, w = cam.image_size
        pix = np.sort(rng.choice(h * w, min(config.rays_per_step, h * w), replace=False))
        rays = generate_rays(cam, pixel_centers(cam)[pix])
        gt = torch.as_tensor(scene.images[target].reshape(-1, 3)[pix], dtype=dtype)

        opt.zero_grad(set_to_none=True)
        try:
            st = scene_state(model, scene, sources)
            out = render_rays(model, st, rays, training=True, seed=config.train_seed, step=step,
                              ray_ids=pix.tolist())
            loss = torch.mean((out.color - gt) ** 2)
            if out.coarse_color is not None:
                loss = loss + torch.mean((out.coarse_color - gt) ** 2)
            finite = bool(torch.isfinite(loss))
        except NonFiniteError:
            finite = False
        if not finite:
            model.load_state_dict(last_good)
            saved = save_checkpoint(model, checkpoint, state) if checkpoint else None
            raise TrainingDiverged(step, saved)
        loss.backward()
        for group, lr in zip(opt.param_groups, (lr_f, lr_o)):
            group["lr"] = lr
        opt.step()
        if all(bool(torch.isfinite(p).all()) for p in model.parameters()):
            last_good = _snapshot(model)

        err = float(loss.detach())
        state.history.append((step, err, 10.0 * math.log10(1.0 / err) if err > 0 else 99.0))
        state.lr_history.append((lr_f, lr_o))
        state.step = step + 1
        lr_f, lr_o = config.learning_rates(step + 1)
        state.lr_features, state.lr_other = lr_f, lr_o
        if config.log_every and (step % config.log_every == 0 or step + 1 == config.steps):
            log.info("step %d  mse %.6f  psnr %.2f", step, err, state.history[-1][2])
        if callback is not None:
            callback(step, state)
    if checkpoint:
        save_checkpoint(model, checkpoint, state)
    if metrics_csv:
        state.write_csv(metrics_csv)
    return state


@dataclass
class ViewEvaluation:
    index: int
    psnr: float
    ssim: float
    image: np.ndarray
    depth: np.ndarray
    truth: np.ndarray
    truth_depth: np.ndarray


def evaluate_view(model: GolfNRT, scene: SyntheticScene, index: int, source_views: int = 3,
                  chunk_size: int = 1024) -> ViewEvaluation:
    sources = source_views_for(scene, index, source_views)
    with torch.no_grad():
        st = scene_state(model, scene, sources)
    r = render_image(model, scene.cameras[index], st, chunk_size)
    truth = scene.images[index]
    return ViewEvaluation(index, psnr(r.image, truth), ssim(r.image, truth), r.image, r.depth, truth,
                          scene.depths[index])


@dataclass
class DepthLocalization:
    adaptive_mass: np.ndarray  # per ray: refined-density mass within the band
    uniform_mass: np.ndarray   # per ray: share of uniform-stage samples within the band
    truth: np.ndarray          # analytic hit distance per ray

    @property
    def adaptive(self) -> float:
        return float(self.adaptive_mass.mean())

    @property
    def uniform(self) -> float:
        return float(self.uniform_mass.mean())


def depth_localization(model: GolfNRT, scene: SyntheticScene, index: int, primitive: int = 0,
                       band: float = 0.1, source_views: int = 3, chunk_size: int = 256) -> DepthLocalization:
    """For every pixel ray of camera ``index`` whose closest hit is
    ``primitive``, the density mass within ``(1 +- band)`` of the true hit
    distance, for the refined stage and for the uniform stage."""
    cam = scene.cameras[index]
    rays = generate_rays(cam, pixel_centers(cam))
    _, dist, which = scene.trace(rays.origins, rays.directions)
    sel = np.flatnonzero(which == primitive)
    rays, dist = rays[sel], dist[sel]
    sources = source_views_for(scene, index, source_views)
    adaptive, uniform = [], []
    with torch.no_grad():
        st = scene_state(model, scene, sources)
        for s in range(0, len(rays), chunk_size):
            out = render_rays(model, st, rays[s:s + chunk_size])
            d = dist[s:s + chunk_size]
            lo, hi = (1 - band) * d, (1 + band) * d
            adaptive.append(out.pdf.mass_between(lo, hi))
            c = out.coarse_depths
            uniform.append(((c >= lo[:, None]) & (c <= hi[:, None])).mean(-1))
    return DepthLocalization(np.concatenate(adaptive), np.concatenate(uniform), dist)
