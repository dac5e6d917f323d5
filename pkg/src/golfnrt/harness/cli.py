"""Command line entry point.

Exit codes: 0 success, 1 validation failure (bad scene or config, failed
checks, diverged training), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..geometry import GeometryError, generate_rays
from ..numkernel import NonFiniteError, ShapeError
from ..pipeline import PROFILES, GolfNRT, ModelConfig, read_config_file, render_image, render_rays, split_config
from ..sparse_attention import build_encoder, build_full_encoder, cost_model, cost_model_full, measured_flops
from .imageio import save_float_dump, save_png
from .scene import SceneSpecError, bundled_scene_path, make_scene
from .train import (TrainConfig, TrainingDiverged, depth_localization, evaluate_view, load_checkpoint,
                    scene_state, source_views_for, train)

log = logging.getLogger("golfnrt")


class ValidationError(Exception):
    """Input that parses but is not acceptable (exit code 1)."""


# ---------------------------------------------------------------------------
# Config flags generated from the dataclasses


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, title: str) -> None:
    group = parser.add_argument_group(title)
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        kind = type(default) if default is not None else int
        if kind is bool:
            group.add_argument(_flag(f.name), dest=f.name, default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes", "on"),
                               metavar="BOOL", help=f"(default {default})")
        elif kind is tuple:
            group.add_argument(_flag(f.name), dest=f.name, default=None, type=float, nargs=len(default),
                               help=f"(default {' '.join(map(str, default))})")
        else:
            group.add_argument(_flag(f.name), dest=f.name, default=None, type=kind, help=f"(default {default})")


def _collect(args: argparse.Namespace, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
            if getattr(args, f.name, None) is not None}


def model_config(args: argparse.Namespace) -> ModelConfig:
    """Profile defaults, then the config file, then explicit flags."""
    values: dict = {}
    train_values: dict = {}
    if getattr(args, "config", None):
        m, t = split_config(read_config_file(args.config), ModelConfig, TrainConfig)
        values.update(m)
        train_values.update(t)
    args._train_from_file = train_values
    values.update(_collect(args, ModelConfig))
    return PROFILES[args.profile](**values)


def train_config(args: argparse.Namespace) -> TrainConfig:
    values = dict(getattr(args, "_train_from_file", {}))
    values.update(_collect(args, TrainConfig))
    return TrainConfig(**values)


def _load_scene(args):
    return make_scene(Path(args.scene) if args.scene else bundled_scene_path())


def _model(args) -> GolfNRT:
    cfg = model_config(args)
    if getattr(args, "checkpoint", None):
        overrides = _collect(args, ModelConfig)
        return load_checkpoint(args.checkpoint, **overrides)
    return GolfNRT(cfg)


def _camera_index(scene, args) -> int:
    if args.camera is not None:
        if not 0 <= args.camera < len(scene.cameras):
            raise ValidationError(f"camera index {args.camera} out of range 0..{len(scene.cameras) - 1}")
        return args.camera
    return (scene.test_indices or scene.train_indices or [0])[0]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_make_scene(args) -> int:
    scene = _load_scene(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, (cam, role) in enumerate(zip(scene.cameras, scene.roles)):
        save_png(out / f"view_{i:02d}.png", scene.images[i])
        save_float_dump(out / f"depth_{i:02d}.f64", scene.depths[i], {"camera": i, "role": role})
        cams.append({**cam.to_dict(), "role": role})
    (out / "cameras.json").write_text(json.dumps(cams, indent=1))
    print(f"wrote {len(scene.cameras)} views to {out}")
    return 0


def cmd_train(args) -> int:
    scene = _load_scene(args)
    model = _model(args)
    cfg = train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(model.config.seed)
    try:
        state = train(model, scene, cfg, checkpoint=out / "model.ckpt", metrics_csv=out / "metrics.csv")
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return 1
    from .plotting import plot_loss

    if state.history:
        plot_loss(out / "loss.png", state.history)
    if scene.test_indices:
        ev = evaluate_view(model, scene, scene.test_indices[0], cfg.source_views)
        print(f"held-out view {ev.index}: psnr {ev.psnr:.2f} dB  ssim {ev.ssim:.4f}")
    print(f"trained {state.step} steps; checkpoint {out / 'model.ckpt'}")
    return 0


def _dump_rays(args, scene, model, index: int):
    """Render the requested pixels (default: a handful along the middle row)."""
    cam = scene.cameras[index]
    h, w = cam.image_size
    if args.pixel:
        px = np.array([[r + 0.5, c + 0.5] for r, c in args.pixel], dtype=np.float64)
    else:
        cols = np.linspace(0, w - 1, 5).round()
        px = np.stack([np.full(5, h // 2 + 0.5), cols + 0.5], -1)
    rays = generate_rays(cam, px)
    _, truth, _ = scene.trace(rays.origins, rays.directions)
    sources = source_views_for(scene, index, args.source_views)
    with torch.no_grad():
        out = render_rays(model, scene_state(model, scene, sources), rays)
    return px, truth, out


def write_attention_csv(path, px, truth, out) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ray", "row", "col", "true_depth", "depth", "weight", "valid"])
        w = out.weights.detach().numpy()
        for b in range(len(px)):
            for d, wt, v in zip(out.depths[b], w[b], out.valid[b]):
                wr.writerow([b, px[b, 0], px[b, 1], truth[b], repr(float(d)), repr(float(wt)), int(v)])
    return path


def write_pdf_csv(path, px, truth, out) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ray", "row", "col", "true_depth", "kind", "depth", "value"])
        for b in range(len(px)):
            for d, wt in zip(out.coarse_depths[b], out.coarse_weights[b]):
                wr.writerow([b, px[b, 0], px[b, 1], truth[b], "coarse_weight", repr(float(d)), repr(float(wt))])
            if out.pdf is not None:
                for g, p in zip(out.pdf.grid[b], out.pdf.density[b]):
                    wr.writerow([b, px[b, 0], px[b, 1], truth[b], "density", repr(float(g)), repr(float(p))])
            for d in out.fine_depths[b]:
                wr.writerow([b, px[b, 0], px[b, 1], truth[b], "fine_sample", repr(float(d)), ""])
    return path


def _plot_dumps(csv_path: Path, kind: str, px, truth, out) -> None:
    from .plotting import plot_attention, plot_ray_pdf

    if kind == "attn":
        plot_attention(csv_path.with_suffix(".png"), out.depths, out.weights.detach().numpy(), truth,
                       [f"({int(r)}, {int(c)})" for r, c in px])
    elif out.pdf is not None:
        for b in range(len(px)):
            plot_ray_pdf(csv_path.with_name(f"{csv_path.stem}_ray{b}.png"), out.coarse_depths[b],
                         out.coarse_weights[b], out.pdf.grid[b], out.pdf.density[b], out.fine_depths[b],
                         truth[b] if np.isfinite(truth[b]) else None, f"pixel ({int(px[b, 0])}, {int(px[b, 1])})")


def cmd_render(args) -> int:
    scene = _load_scene(args)
    model = _model(args)
    index = _camera_index(scene, args)
    sources = source_views_for(scene, index, args.source_views)
    with torch.no_grad():
        st = scene_state(model, scene, sources)
    img = render_image(model, scene.cameras[index], st, args.chunk_size)
    save_png(args.out, img.image)
    if args.raw:
        save_float_dump(args.raw, img.raw, {"camera": index})
    if args.depth:
        save_float_dump(args.depth, img.depth, {"camera": index})
    if args.dump_attn or args.dump_pdf:
        px, truth, out = _dump_rays(args, scene, model, index)
        if args.dump_attn:
            _plot_dumps(write_attention_csv(args.dump_attn, px, truth, out), "attn", px, truth, out)
        if args.dump_pdf:
            _plot_dumps(write_pdf_csv(args.dump_pdf, px, truth, out), "pdf", px, truth, out)
    print(f"rendered camera {index} ({img.image.shape[0]}x{img.image.shape[1]}) to {args.out}")
    return 0


def cmd_dump(args, kind: str) -> int:
    scene = _load_scene(args)
    model = _model(args)
    index = _camera_index(scene, args)
    px, truth, out = _dump_rays(args, scene, model, index)
    path = (write_attention_csv if kind == "attn" else write_pdf_csv)(args.out, px, truth, out)
    _plot_dumps(path, kind, px, truth, out)
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_comparison

    scene = _load_scene(args)
    model = _model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = [args.camera] if args.camera is not None else (scene.test_indices or scene.train_indices)
    rows = []
    for i in indices:
        ev = evaluate_view(model, scene, i, args.source_views, args.chunk_size)
        dl = depth_localization(model, scene, i, source_views=args.source_views)
        finite = np.isfinite(ev.truth_depth)
        within = float(np.mean(np.abs(ev.depth[finite] - ev.truth_depth[finite]) <= 0.1 * ev.truth_depth[finite]))
        rows.append([i, scene.roles[i], ev.psnr, ev.ssim, within, dl.adaptive, dl.uniform])
        save_png(out / f"render_{i:02d}.png", ev.image)
        plot_comparison(out / f"compare_{i:02d}.png", ev.truth, ev.image, ev.truth_depth, ev.depth,
                        f"camera {i}: {ev.psnr:.2f} dB")
        print(f"camera {i} ({scene.roles[i]}): psnr {ev.psnr:.2f} dB  ssim {ev.ssim:.4f}  "
              f"depth within 10%: {within:.2f}  band mass adaptive {dl.adaptive:.3f} uniform {dl.uniform:.3f}")
    with open(out / "eval.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["camera", "role", "psnr", "ssim", "depth_within_10pct", "band_mass_adaptive",
                     "band_mass_uniform"])
        wr.writerows(rows)
    return 0


def cmd_bench_attn(args) -> int:
    sparse = cost_model(args.H, args.W, args.C, args.N, args.P, args.G, args.heads, args.blocks, args.ffn_ratio)
    full = cost_model_full(args.H, args.W, args.C, args.N, args.heads, args.blocks, args.ffn_ratio)
    lines = ["model,stage,flops,parameters"]
    for name, rep in (("sparse", sparse), ("full", full)):
        body = rep.to_csv().strip().splitlines()[1:]
        lines += [f"{name},{row}" for row in body]
    if args.measure:
        ms = measured_flops(build_encoder(args.C, args.heads, args.P, args.G, args.blocks, args.ffn_ratio),
                            args.N, args.H, args.W, args.C)
        mf = measured_flops(build_full_encoder(args.C, args.heads, args.blocks, args.ffn_ratio),
                            args.N, args.H, args.W, args.C)
        lines += [f"sparse,measured,{ms},{sparse.parameters}", f"full,measured,{mf},{full.parameters}"]
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text)
        if args.plot:
            from .plotting import plot_scaling

            sizes = [(args.H * k, args.W * k) for k in (1, 2, 4)]
            sizes = [(h, w) for h, w in sizes if h % args.P == 0 and w % args.G == 0]
            pix = [h * w for h, w in sizes]
            s_scores = [cost_model(h, w, args.C, args.N, args.P, args.G, args.heads, args.blocks,
                                   args.ffn_ratio).score_flops for h, w in sizes]
            f_scores = [cost_model_full(h, w, args.C, args.N, args.heads, args.blocks,
                                        args.ffn_ratio).score_flops for h, w in sizes]
            plot_scaling(out.with_suffix(".png"), pix, s_scores, f_scores, "attention-score FLOPs")
    sys.stdout.write(csv_text)
    print(f"# full/sparse FLOP ratio {full.flops / sparse.flops:.3f}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks()
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="golfnrt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def scene_args(p, out_required=True, out_help="output path"):
        p.add_argument("--scene", help="scene JSON (default: bundled plane + sphere)")
        p.add_argument("--out", required=out_required, help=out_help)

    def model_args(p):
        p.add_argument("--config", help="TOML or JSON config (model and training keys)")
        p.add_argument("--profile", choices=sorted(PROFILES), default="micro")
        p.add_argument("--checkpoint", help="trained parameters (config is read from its sidecar)")
        _add_dataclass_flags(p, ModelConfig, "model config")

    def view_args(p):
        p.add_argument("--camera", type=int, help="camera index (default: first held-out camera)")
        p.add_argument("--source-views", type=int, default=3)
        p.add_argument("--chunk-size", type=int, default=1024)

    def pixel_args(p):
        p.add_argument("--pixel", type=int, nargs=2, action="append", metavar=("ROW", "COL"),
                       help="pixel to dump (repeatable; default: five along the middle row)")

    p = sub.add_parser("make-scene", help="ray trace a scene spec to PNGs and depth dumps")
    scene_args(p, out_help="output directory")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", help="fit the model to a scene")
    scene_args(p, out_help="output directory (checkpoint, metrics.csv, loss.png)")
    model_args(p)
    _add_dataclass_flags(p, TrainConfig, "training config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one camera to PNG")
    scene_args(p, out_help="PNG path")
    model_args(p)
    view_args(p)
    pixel_args(p)
    p.add_argument("--raw", help="also write the unclamped image as a float dump")
    p.add_argument("--depth", help="also write the expected-depth map as a float dump")
    p.add_argument("--dump-attn", help="CSV of final attention weights for the dumped pixels")
    p.add_argument("--dump-pdf", help="CSV of coarse weights, smoothed density and refined samples")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR, SSIM and depth checks on held-out cameras")
    scene_args(p, out_help="output directory")
    model_args(p)
    view_args(p)
    p.set_defaults(func=cmd_eval)

    for name, kind in (("dump-pdf", "pdf"), ("dump-attn", "attn")):
        p = sub.add_parser(name, help=f"per-ray {'sampling density' if kind == 'pdf' else 'attention'} CSV + figure")
        scene_args(p, out_help="CSV path")
        model_args(p)
        view_args(p)
        pixel_args(p)
        p.set_defaults(func=lambda a, k=kind: cmd_dump(a, k))

    p = sub.add_parser("bench-attn", help="analytic FLOP/parameter table for sparse vs full attention")
    for flag, default in (("--H", 32), ("--W", 32), ("--C", 64), ("--N", 3), ("--P", 8), ("--G", 8),
                          ("--heads", 4), ("--blocks", 2), ("--ffn-ratio", 2)):
        p.add_argument(flag, type=int, default=default)
    p.add_argument("--measure", action="store_true", help="also count FLOPs by running the layers")
    p.add_argument("--out", help="CSV path (a scaling figure is written next to it with --plot)")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("verify", help="run the invariant and oracle checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return int(args.func(args))
    except (ValidationError, SceneSpecError, GeometryError, ShapeError, NonFiniteError, KeyError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
