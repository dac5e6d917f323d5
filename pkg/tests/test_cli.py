import csv
import json

import numpy as np
import pytest

from golfnrt.harness.cli import main
from golfnrt.harness.imageio import load_float_dump, load_png
from golfnrt.sparse_attention import cost_model, cost_model_full

TINY_FLAGS = ["--embed-width", "16", "--heads", "2", "--encoder-blocks", "1", "--decoder-layers", "1",
              "--vl-blocks", "1", "--n-coarse", "8", "--n-fine", "4", "--fourier-octaves", "2",
              "--depth-octaves", "2"]


@pytest.fixture
def trained(tmp_path, small_scene_file):
    out = tmp_path / "run"
    assert main(["train", "--scene", str(small_scene_file), "--out", str(out), "--steps", "2",
                 "--rays-per-step", "16", *TINY_FLAGS]) == 0
    return out


def test_make_scene(tmp_path, small_scene_file, small_scene):
    out = tmp_path / "views"
    assert main(["make-scene", "--scene", str(small_scene_file), "--out", str(out)]) == 0
    n = len(small_scene.cameras)
    assert len(list(out.glob("view_*.png"))) == n
    assert load_png(out / "view_00.png").shape == (16, 16, 3)
    depth, meta = load_float_dump(out / "depth_11.f64")
    assert np.array_equal(depth, small_scene.depths[11]) and meta["role"] == "test"
    assert len(json.loads((out / "cameras.json").read_text())) == n


def test_train_writes_checkpoint_metrics_and_figure(trained):
    assert (trained / "model.ckpt").exists() and (trained / "model.ckpt.json").exists()
    assert (trained / "loss.png").stat().st_size > 0
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert len(rows) == 2


def test_render_outputs(trained, tmp_path, small_scene_file, capsys):
    png = tmp_path / "r.png"
    args = ["render", "--scene", str(small_scene_file), "--checkpoint", str(trained / "model.ckpt"),
            "--out", str(png), "--raw", str(tmp_path / "raw.f64"), "--depth", str(tmp_path / "d.f64"),
            "--dump-attn", str(tmp_path / "attn.csv"), "--dump-pdf", str(tmp_path / "pdf.csv"),
            "--pixel", "8", "8"]
    assert main(args) == 0
    assert load_png(png).shape == (16, 16, 3)
    raw, _ = load_float_dump(tmp_path / "raw.f64")
    depth, _ = load_float_dump(tmp_path / "d.f64")
    assert raw.shape == (16, 16, 3) and depth.shape == (16, 16)
    assert (tmp_path / "attn.png").exists() and (tmp_path / "pdf_ray0.png").exists()
    rows = list(csv.DictReader(open(tmp_path / "attn.csv")))
    assert abs(sum(float(r["weight"]) for r in rows) - 1.0) < 1e-9


def test_dump_commands(trained, tmp_path, small_scene_file):
    ck = str(trained / "model.ckpt")
    assert main(["dump-pdf", "--scene", str(small_scene_file), "--checkpoint", ck,
                 "--out", str(tmp_path / "p.csv")]) == 0
    kinds = {r["kind"] for r in csv.DictReader(open(tmp_path / "p.csv"))}
    assert kinds == {"coarse_weight", "density", "fine_sample"}
    assert len(list(tmp_path.glob("p_ray*.png"))) == 5
    assert main(["dump-attn", "--scene", str(small_scene_file), "--checkpoint", ck,
                 "--out", str(tmp_path / "a.csv"), "--pixel", "1", "2", "--pixel", "3", "4"]) == 0
    rays = {r["ray"] for r in csv.DictReader(open(tmp_path / "a.csv"))}
    assert rays == {"0", "1"} and (tmp_path / "a.png").exists()


def test_eval(trained, tmp_path, small_scene_file):
    out = tmp_path / "ev"
    assert main(["eval", "--scene", str(small_scene_file), "--checkpoint", str(trained / "model.ckpt"),
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "eval.csv")))
    assert [r["camera"] for r in rows] == ["11"]
    assert (out / "render_11.png").exists() and (out / "compare_11.png").exists()


def test_bench_attn_matches_cost_model(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench-attn", "--H", "16", "--W", "16", "--C", "8", "--P", "4", "--G", "4", "--out", str(out),
                 "--plot"]) == 0
    rows = list(csv.DictReader(open(out)))
    totals = {r["model"]: int(r["flops"]) for r in rows if r["stage"] == "total"}
    assert totals["sparse"] == cost_model(16, 16, 8, 3, 4, 4, 4, 2, 2).flops
    assert totals["full"] == cost_model_full(16, 16, 8, 3, 4, 2, 2).flops
    assert out.with_suffix(".png").exists()


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_exit_codes(tmp_path, small_scene_file, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"primitives": []}')
    assert main(["make-scene", "--scene", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["render", "--scene", str(small_scene_file), "--out", str(tmp_path / "a.png"),
                 "--camera", "99", *TINY_FLAGS]) == 1
    assert main(["render", "--scene", str(small_scene_file), "--out", str(tmp_path / "a.png"),
                 "--embed-width", "15", "--heads", "2"]) == 1
    for argv in (["render"], ["bogus"], ["train", "--steps", "many", "--out", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_config_file_and_flag_precedence(tmp_path, small_scene_file):
    cfg = tmp_path / "c.toml"
    cfg.write_text("embed_width = 16\nheads = 2\nvl_blocks = 1\nn_coarse = 8\nn_fine = 4\nsteps = 1\n"
                   "rays_per_step = 8\n")
    out = tmp_path / "run"
    assert main(["train", "--scene", str(small_scene_file), "--config", str(cfg), "--out", str(out),
                 "--n-fine", "2"]) == 0
    meta = json.loads((out / "model.ckpt.json").read_text())
    assert meta["model"]["embed_width"] == 16 and meta["model"]["n_fine"] == 2
    assert meta["train"]["step"] == 1
