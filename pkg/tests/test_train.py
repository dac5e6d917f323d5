import csv

import numpy as np
import pytest
import torch

from golfnrt.harness.train import (TrainConfig, TrainingDiverged, depth_localization, evaluate_view,
                                   load_checkpoint, save_checkpoint, source_views_for, train)
from golfnrt.pipeline import GolfNRT, ModelConfig

TINY = dict(embed_width=16, heads=2, encoder_blocks=1, decoder_layers=1, vl_blocks=1, n_coarse=8, n_fine=4,
            fourier_octaves=2, depth_octaves=2)


def tiny_model(**kw):
    return GolfNRT(ModelConfig.micro(**{**TINY, **kw}))


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_zero_steps_leaves_parameters_untouched(small_scene, tmp_path):
    model = tiny_model()
    before = params(model)
    state = train(model, small_scene, TrainConfig(steps=0), checkpoint=tmp_path / "m.ckpt")
    assert state.step == 0 and state.history == []
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert all(torch.equal(before[k], v) for k, v in load_checkpoint(tmp_path / "m.ckpt").state_dict().items())


def test_loss_curves_are_reproducible(small_scene):
    cfg = TrainConfig(steps=3, rays_per_step=32, log_every=0)
    a = train(tiny_model(), small_scene, cfg).losses
    b = train(tiny_model(), small_scene, cfg).losses
    assert np.array_equal(a, b) and np.isfinite(a).all()
    c = train(tiny_model(), small_scene, TrainConfig(steps=3, rays_per_step=32, log_every=0, train_seed=1)).losses
    assert not np.array_equal(a, c)


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=100, lr_features=1e-3, lr_other=5e-4, decay_rate=0.1)
    rates = np.array([cfg.learning_rates(s) for s in range(101)])
    assert np.all(np.diff(rates, axis=0) <= 0)
    assert np.allclose(rates[0], [1e-3, 5e-4])
    assert np.allclose(rates[100], [1e-4, 5e-5])
    assert np.allclose(rates[50], [1e-3 * 0.1 ** 0.5, 5e-4 * 0.1 ** 0.5])
    fixed = TrainConfig(steps=10, decay_steps=1000)
    assert fixed.learning_rates(10)[0] == pytest.approx(1e-3 * 0.1 ** 0.01)


def test_recorded_rates_follow_schedule(small_scene):
    cfg = TrainConfig(steps=3, rays_per_step=16, log_every=0)
    state = train(tiny_model(), small_scene, cfg)
    assert state.lr_history == [cfg.learning_rates(s) for s in range(3)]
    assert (state.lr_features, state.lr_other) == cfg.learning_rates(3)


def test_training_reduces_loss_on_small_scene(small_scene):
    torch.manual_seed(0)
    state = train(tiny_model(), small_scene, TrainConfig(steps=40, rays_per_step=64, lr_other=2e-3,
                                                         lr_features=2e-3, log_every=0))
    assert state.losses[-10:].mean() < state.losses[:5].mean()


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(rays_per_step=0), dict(lr_other=0), dict(decay_rate=0),
                                dict(decay_rate=1.5)])
def test_bad_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_divergence_restores_last_good_parameters(small_scene, tmp_path):
    model = tiny_model()
    seen = {}

    def poison(step, state):
        if step == 1:
            seen["good"] = params(model)
            with torch.no_grad():
                next(model.parameters()).fill_(float("nan"))

    with pytest.raises(TrainingDiverged) as exc:
        train(model, small_scene, TrainConfig(steps=5, rays_per_step=16, log_every=0),
              checkpoint=tmp_path / "m.ckpt", callback=poison)
    assert exc.value.step == 2
    assert exc.value.checkpoint == tmp_path / "m.ckpt"
    restored = load_checkpoint(exc.value.checkpoint)
    assert all(torch.isfinite(v).all() for v in restored.state_dict().values())
    assert all(torch.equal(seen["good"][k], v) for k, v in restored.state_dict().items())


def test_metrics_csv_and_checkpoint_sidecar(small_scene, tmp_path):
    model = tiny_model()
    state = train(model, small_scene, TrainConfig(steps=2, rays_per_step=16, log_every=0),
                  checkpoint=tmp_path / "m.ckpt", metrics_csv=tmp_path / "metrics.csv")
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == [0, 1]
    assert [float(r["mse"]) for r in rows] == state.losses.tolist()
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    assert all(torch.equal(model.state_dict()[k], v) for k, v in back.state_dict().items())


def test_checkpoint_overrides(tmp_path):
    model = tiny_model()
    save_checkpoint(model, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt", n_fine=2).config.n_fine == 2


def test_source_views_use_marked_cameras(small_scene):
    assert source_views_for(small_scene, 11, 3) == [0, 1, 2]


def test_evaluation_and_localization_shapes(small_scene):
    model = tiny_model()
    ev = evaluate_view(model, small_scene, 11)
    assert ev.image.shape == (16, 16, 3) and ev.depth.shape == (16, 16)
    assert 0 < ev.psnr < 99 and -1 <= ev.ssim <= 1
    dl = depth_localization(model, small_scene, 11)
    assert len(dl.adaptive_mass) == len(dl.truth) > 0
    assert np.all((dl.adaptive_mass >= 0) & (dl.adaptive_mass <= 1 + 1e-9))
    assert 0 <= dl.uniform <= 1
