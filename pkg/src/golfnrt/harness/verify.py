"""Structural invariants and oracle cross-checks, runnable from the CLI.

Each check returns ``(passed, detail)``; :func:`run_checks` prints one line
per check.  Everything runs in float64 on a 16x16 version of the bundled
scene and finishes in well under a minute.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..adaptive_sampling import kernel_regress
from ..geometry import generate_rays, pixel_centers
from ..local_geometry import ViewTransformer
from ..numkernel import MultiHeadAttention, grad_check
from ..pipeline import GolfNRT, ModelConfig, prepare_scene, render_image, render_rays
from ..sparse_attention import (BlockAttention, GridAttention, InterViewAttention, block_groups, block_mask,
                                build_encoder, build_full_encoder, cost_model, cost_model_full, grid_groups,
                                grid_mask, measured_flops)
from .scene import SyntheticScene, bundled_scene
from .train import TrainConfig, load_checkpoint, save_checkpoint, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# Dense oracles


def dense_masked_attention(attn: MultiHeadAttention, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Apply ``attn`` once to all ``N*H*W`` tokens with an explicit token mask."""
    N, H, W, C = x.shape
    out, _ = attn(x.reshape(1, N * H * W, C), mask=allowed.unsqueeze(0))
    return out.reshape(N, H, W, C)


def token_masks(N: int, H: int, W: int, P: int, G: int) -> dict[str, torch.Tensor]:
    """(N*H*W)^2 masks for block, grid and inter-view attention."""
    same_view = torch.arange(N).repeat_interleave(H * W)
    same_view = same_view[:, None] == same_view[None, :]
    pix = torch.arange(H * W).repeat(N)
    return {
        "block": same_view & block_mask(H, W, P).repeat(N, N),
        "grid": same_view & grid_mask(H, W, G).repeat(N, N),
        "view": pix[:, None] == pix[None, :],
    }


def sparse_vs_dense(configs: int = 20, seed: int = 0) -> float:
    """Largest deviation of block/grid/view attention from the dense oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(configs):
        P = int(rng.choice([1, 2, 4]))
        G = int(rng.choice([1, 2, 4]))
        m = int(np.lcm(P, G))
        H, W = m * int(rng.integers(1, 3)), m * int(rng.integers(1, 3))
        N = int(rng.integers(1, 4))
        heads = int(rng.choice([1, 2]))
        C = 4 * heads
        gen = torch.Generator().manual_seed(seed * 1000 + i)
        x = torch.randn(N, H, W, C, generator=gen, dtype=torch.float64)
        masks = token_masks(N, H, W, P, G)
        layers = {"block": BlockAttention(C, heads, P, gen), "grid": GridAttention(C, heads, G, gen),
                  "view": InterViewAttention(C, heads, gen)}
        with torch.no_grad():
            for key, layer in layers.items():
                ref = dense_masked_attention(layer.attn, x, masks[key])
                worst = max(worst, float((layer(x) - ref).abs().max()))
    return worst


def partitions_cover(max_side: int = 8) -> bool:
    for H in range(1, max_side + 1):
        for W in range(1, max_side + 1):
            for S in range(1, max(H, W) + 1):
                if H % S or W % S:
                    continue
                for groups in (block_groups(H, W, S), grid_groups(H, W, S)):
                    flat = sorted(i for g in groups for i in g)
                    if flat != list(range(H * W)) or any(len(g) != S * S for g in groups):
                        return False
    return True


# ---------------------------------------------------------------------------
# Pipeline fixtures


def tiny_config(**overrides) -> ModelConfig:
    base = dict(embed_width=16, heads=2, encoder_blocks=1, decoder_layers=1, vl_blocks=2,
                n_coarse=8, n_fine=4, block_size=1, grid_size=2, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


class Fixture:
    def __init__(self, scene: SyntheticScene | None = None, config: ModelConfig | None = None):
        self.scene = scene or bundled_scene(16)
        self.model = GolfNRT(config or tiny_config())
        self.sources = self.scene.source_indices

    def state(self, order=None):
        idx = [self.sources[i] for i in (order or range(len(self.sources)))]
        with torch.no_grad():
            return prepare_scene(self.model, np.stack([self.scene.images[i] for i in idx]),
                                 [self.scene.cameras[i] for i in idx])

    def rays(self, count: int = 24, index: int | None = None):
        cam = self.scene.cameras[self.scene.test_indices[0] if index is None else index]
        px = pixel_centers(cam)
        pick = np.linspace(0, len(px) - 1, count).astype(int)
        return generate_rays(cam, px[pick])

    def render(self, rays, state=None):
        with torch.no_grad():
            return render_rays(self.model, state or self.state(), rays)


# ---------------------------------------------------------------------------
# Checks


def check_sparse_oracle():
    worst = sparse_vs_dense()
    return worst < 1e-10, f"max |sparse - dense| = {worst:.2e} over 20 configs"


def check_partitions():
    ok = partitions_cover()
    return ok, "block and grid groups tile every pixel exactly once for H, W <= 8"


def check_cost_model():
    H = W = 32
    sparse = cost_model(H, W, 64, 3, 8, 8, 4, 2)
    full = cost_model_full(H, W, 64, 3, 4, 2)
    ms = measured_flops(build_encoder(64, 4, 8, 8, 2), 3, H, W, 64)
    mf = measured_flops(build_full_encoder(64, 4, 2), 3, H, W, 64)
    ratio = full.flops / sparse.flops
    err = max(abs(ms - sparse.flops) / sparse.flops, abs(mf - full.flops) / full.flops)
    return ratio >= 3 and err < 0.01, f"full/sparse = {ratio:.2f}, counter mismatch {err:.2e}"


def check_pdf_normalized():
    rng = np.random.default_rng(0)
    d = np.sort(rng.uniform(2, 6, (16, 32)), axis=1)
    w = rng.dirichlet(np.ones(32), 16)
    pdf = kernel_regress(d, w, 0.2, 128, 2.0, 6.0)
    err = float(np.abs(pdf.integral() - 1).max())
    return err < 1e-9, f"|integral - 1| = {err:.1e}"


def check_weights_normalized(fx: Fixture):
    out = fx.render(fx.rays())
    w = out.weights.numpy()
    err = float(np.abs(w.sum(-1) - 1).max())
    return err < 1e-6 and bool((w >= 0).all()), f"max |sum w - 1| = {err:.1e}, min w = {w.min():.2e}"


def check_permutation(fx: Fixture):
    rays = fx.rays()
    a = fx.render(rays, fx.state()).color
    b = fx.render(rays, fx.state([2, 0, 1])).color
    err = float((a - b).abs().max())
    return err < 1e-8, f"max color change under view permutation = {err:.1e}"


def check_occlusion_masking():
    gen = torch.Generator().manual_seed(1)
    vt = ViewTransformer(16, 2, generator=gen)
    q = torch.randn(5, 7, 16, generator=gen, dtype=torch.float64)
    kv = torch.randn(5, 7, 3, 16, generator=gen, dtype=torch.float64)
    valid = torch.rand(5, 7, 3, generator=gen) > 0.3
    extra = torch.randn(5, 7, 1, 16, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        base, w = vt(q, kv, valid, return_weights=True)
        padded, wp = vt(q, torch.cat([kv, extra], 2), torch.cat([valid, torch.zeros(5, 7, 1, dtype=torch.bool)], 2),
                        return_weights=True)
    exact = torch.equal(base, padded)
    zero = bool((w[~valid.unsqueeze(-2).expand_as(w)] == 0).all()) and bool((wp[..., 3] == 0).all())
    return exact and zero, f"extra invalid view bit-identical: {exact}; invalid weights exactly 0: {zero}"


def check_chunking(fx: Fixture):
    cam = fx.scene.cameras[fx.scene.test_indices[0]].scaled(0.5)
    state = fx.state()
    a = render_image(fx.model, cam, state, chunk_size=1)
    b = render_image(fx.model, cam, state, chunk_size=64)
    same = np.array_equal(a.raw, b.raw) and np.array_equal(a.depth, b.depth)
    return same, f"8x8 render, chunk 1 vs 64 bit-identical: {same}"


def check_checkpoint(fx: Fixture):
    rays = fx.rays()
    before = fx.render(rays).color
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(fx.model, Path(tmp) / "model.ckpt")
        loaded = load_checkpoint(path)
    with torch.no_grad():
        st = prepare_scene(loaded, np.stack([fx.scene.images[i] for i in fx.sources]),
                           [fx.scene.cameras[i] for i in fx.sources])
        after = render_rays(loaded, st, rays).color
    same = torch.equal(before, after)
    return same, f"save/load/render bit-identical: {same}"


def check_determinism(fx: Fixture):
    rays = fx.rays()
    other = GolfNRT(fx.model.config)
    with torch.no_grad():
        st = prepare_scene(other, np.stack([fx.scene.images[i] for i in fx.sources]),
                           [fx.scene.cameras[i] for i in fx.sources])
        b = render_rays(other, st, rays).color
    same_init = torch.equal(fx.render(rays).color, b)
    cfg = TrainConfig(steps=2, rays_per_step=16, log_every=0)
    losses = [train(GolfNRT(fx.model.config), fx.scene, cfg).losses for _ in range(2)]
    same_train = np.array_equal(losses[0], losses[1])
    return same_init and same_train, f"seeded init bit-identical: {same_init}; 2-step loss curves identical: {same_train}"


def check_gradients(fx: Fixture):
    model = GolfNRT(tiny_config(n_coarse=4, n_fine=2, vl_blocks=1))
    rays = fx.rays(3)
    images = np.stack([fx.scene.images[i] for i in fx.sources])
    cams = [fx.scene.cameras[i] for i in fx.sources]

    with torch.no_grad():
        pinned = render_rays(model, prepare_scene(model, images, cams), rays).fine_depths

    def loss():
        st = prepare_scene(model, images, cams)
        return render_rays(model, st, rays, fine_depths=pinned).color.square().sum()

    report = grad_check(loss, model, tolerance=1e-3, total_entries=20, seed=0)
    return report.passed, f"end-to-end max rel err {report.max_rel_error:.1e} on {report.checked_entries} entries"


def all_checks() -> list[tuple[str, Callable]]:
    fx: dict = {}

    def with_fixture(fn):
        def run():
            if "fx" not in fx:
                fx["fx"] = Fixture()
            return fn(fx["fx"])
        return run

    return [
        ("sparse attention vs dense oracle", check_sparse_oracle),
        ("partition coverage", check_partitions),
        ("cost model vs instrumented counter", check_cost_model),
        ("smoothed density integrates to 1", check_pdf_normalized),
        ("attention weight normalization", with_fixture(check_weights_normalized)),
        ("view permutation invariance", with_fixture(check_permutation)),
        ("occlusion masking exactness", check_occlusion_masking),
        ("chunk-size independence", with_fixture(check_chunking)),
        ("checkpoint round trip", with_fixture(check_checkpoint)),
        ("seeded determinism", with_fixture(check_determinism)),
        ("end-to-end gradient check", with_fixture(check_gradients)),
    ]


def run_checks(echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name, fn in all_checks():
        t = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(passed), detail, time.perf_counter() - t)
        results.append(res)
        if echo:
            echo(res.line())
    return results
