"""Command-line entry points.

Subcommands: synth, track, reconstruct, render, eval, gradcheck, schedule.
Exit codes: 0 success, 1 validation failure, 2 I/O failure. Config files
use a flat INI-style grammar: ``[section]`` headers, ``key = value`` pairs,
``#`` comments (see README for the accepted keys).
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .core import Gaussian4DState
from .diffsched import CheatingDenoiser, LinearDenoiser, ZeroDenoiser, build_schedule, schedule_csv
from .errors import Splat4DError
from .harness import (
    Dataset,
    SceneSpec,
    eval_metrics,
    load_dataset,
    render_dataset,
    save_dataset,
    synth_scene,
)
from .imgio import write_imgf, write_png
from .motionfield import apply_deformation_batch, hexplane_interp_batch
from .appearance import eval_colors_batch
from .optim import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_log
from .splatter import render as splat_render
from .trackmath import (
    QueryPoint,
    nn_track,
    position_loss,
    stage_one_objective,
    write_tracks,
)

__all__ = ["main", "cli"]


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems as validation failures."""

    def error(self, message):
        raise _ArgumentError(message)


def _read_config(path: Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = path.read_text()
    cp.read_string(text)
    return cp


def _spec_from_file(path: Path) -> SceneSpec:
    cp = _read_config(path)

    def get(section, key, cast, default):
        if cp.has_option(section, key):
            return cast(cp.get(section, key))
        return default

    return SceneSpec(
        object_preset=get("object", "preset", str, "sphere-shell"),
        n_gaussians=get("object", "gaussians", int, 64),
        gaussian_scale=get("object", "scale", float, 0.0),
        opacity=get("object", "opacity", float, 0.95),
        motion_preset=get("motion", "preset", str, "rigid-translate"),
        amplitude=get("motion", "amplitude", float, 0.5),
        n_frames=get("motion", "frames", int, 16),
        n_views=get("cameras", "count", int, 4),
        cam_radius=get("cameras", "radius", float, 4.0),
        cam_elevation_deg=get("cameras", "elevation", float, 20.0),
        fov_deg=get("cameras", "fov", float, 50.0),
        image_size=get("images", "size", int, 64),
        feature_mode=get("features", "mode", str, "rendered-descriptor"),
        feature_dim=get("features", "dim", int, 8),
        feature_size=get("features", "size", int, 0),
        sh_l_max=get("appearance", "l_max", int, 1),
        sh_w=get("appearance", "w", int, 4),
        seed=get("scene", "seed", int, 0),
    )


def _train_config_from_file(path: Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    cp = _read_config(path)

    def get(section, key, cast, default):
        if cp.has_option(section, key):
            return cast(cp.get(section, key))
        return default

    return TrainConfig(
        lambda4=get("train", "lambda4", float, 100.0),
        lambda5=get("train", "lambda5", float, 0.01),
        lambda6=get("train", "lambda6", float, 10.0),
        iterations_rec=get("train", "iterations_rec", int, 750),
        iterations_sds=get("train", "iterations_sds", int, 250),
        lr_hexplane=get("train", "lr_hexplane", float, 0.01),
        lr_decoder=get("train", "lr_decoder", float, 1e-4),
        lr_sh=get("train", "lr_sh", float, 2.5e-3),
        batch=get("train", "batch", int, 64),
        seed=get("train", "seed", int, 0),
        decoder_hidden=get("train", "hidden", int, 64),
        arap_k=get("train", "arap_k", int, 8),
        hex_spatial_res=get("hexplane", "spatial", int, 100),
        hex_temporal_res=get("hexplane", "temporal", int, 8),
        hex_dim=get("hexplane", "dim", int, 16),
        hex_levels=get("hexplane", "levels", int, 2),
    )


def _make_denoiser(kind: str, seed: int):
    if kind == "zero":
        return ZeroDenoiser()
    if kind == "linear":
        return LinearDenoiser(seed)
    raise ValueError(f"unknown denoiser kind {kind!r}")


class _TrainedModel:
    """Checkpointed field/decoder/SH bound to one dataset's canonical asset."""

    def __init__(self, dataset: Dataset, field, decoder, sh):
        from .core import DeformedGaussians
        from .splatter import render_hit_depth

        self.dataset = dataset
        self.scene = dataset.canonical
        self.field = field
        self.decoder = decoder
        self.sh = sh
        self.rest = Gaussian4DState.rest(self.scene)
        self.fv = dataset.feature_video()
        scene = self.scene
        self.hit = [
            render_hit_depth(
                DeformedGaussians(
                    scene.positions, scene.rotations, scene.scales, scene.opacities,
                    np.zeros((len(scene), 1)),
                ),
                cam,
            )
            for cam in self.fv.cameras
        ]

    def deformed_at(self, t: int):
        from .motionfield import sample_feature_planes

        scene = self.scene
        feat_const, _ = sample_feature_planes(
            self.fv, self.rest, scene.positions, float(t), hit_depths=self.hit
        )
        hexfeat, _ = hexplane_interp_batch(self.field, scene.positions, float(t))
        dx, dr, ds, _ = self.decoder.forward(np.concatenate([hexfeat, feat_const], axis=1))
        return dx, dr, ds

    def render(self, view: int, t: int):
        scene = self.scene
        cam = self.dataset.cameras[view]
        dx, dr, ds = self.deformed_at(t)
        positions = scene.positions + dx
        vecs = positions - cam.center()
        dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        colors, _ = eval_colors_batch(self.sh.fr, self.sh.l_max, self.sh.n_frames, dirs, float(t))
        dg = apply_deformation_batch(scene, dx, dr, ds, colors)
        return splat_render(dg, cam)


def _cmd_synth(args) -> int:
    spec = _spec_from_file(Path(args.spec))
    cloud, motion = synth_scene(spec)
    dataset = render_dataset(cloud, motion, spec)
    save_dataset(dataset, args.out)
    print(f"dataset written to {args.out}")
    return 0


def _cmd_track(args) -> int:
    dataset = load_dataset(args.dataset)
    temperature = args.temperature
    est_tracks = []
    gt_feat, est_feat, vis = [], [], []
    from .core import FeatureMap
    from .harness import track_feature_coords, gt_track_correspondence_loss

    for tr in dataset.tracks:
        cam = dataset.cameras[tr.view]
        maps = [FeatureMap(dataset.feats[tr.view, j], frame=j, view=tr.view) for j in range(len(tr))]
        est = nn_track(maps, QueryPoint(tr.view, tr.points[0]), (cam.width, cam.height), temperature)
        est.point_id = tr.point_id
        est_tracks.append(est)
        gt_feat.append(track_feature_coords(dataset, tr))
        est_feat.append(est.points)
        vis.append(tr.visible)
    write_tracks(est_tracks, args.out)
    l_corr = gt_track_correspondence_loss(dataset)
    l_pos = position_loss(
        np.stack(gt_feat)[:, None], np.stack(est_feat)[:, None],
        delta=1.0, visible=np.stack(vis)[:, None],
    )
    rng = np.random.Generator(np.random.PCG64(args.seed))
    sched = build_schedule()
    latents = np.stack(
        [
            np.stack(
                [_encode(dataset.images[i, j], dataset.masks[i, j]) for j in range(dataset.n_frames)]
            )
            for i in range(dataset.n_views)
        ]
    )
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(latents[:, 1:].shape)
    z_t = sched.forward_diffuse(latents[:, 1:], t, eps)
    denoiser = _make_denoiser(args.denoiser, args.seed)
    eps_pred = denoiser(latents[:, :1], z_t, t, None)
    from .diffsched import diffusion_loss

    l_diff = diffusion_loss(eps, eps_pred)
    l1 = stage_one_objective(l_diff, l_corr, l_pos, 1.0, 0.1, 10.0)
    print(f"l_diff = {l_diff:.6f}")
    print(f"l_corr = {l_corr:.6f}")
    print(f"l_pos = {l_pos:.6f}")
    print(f"stage_one_objective = {l1:.6f}")
    print(f"nn tracks written to {args.out}")
    return 0


def _encode(rgb, mask):
    from .diffsched import encode_latent

    size = mask.shape[0]
    factor = 8 if size % 8 == 0 else 1
    return encode_latent(rgb, mask, factor)


def _cmd_reconstruct(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.views:
        views = [int(v) for v in args.views.split(",")]
        dataset = dataset.subset_views(views)
    cfg = _train_config_from_file(Path(args.config) if args.config else None)
    denoiser = _make_denoiser(args.denoiser, cfg.seed)
    result = train(dataset.canonical, dataset, cfg, denoiser)
    save_checkpoint(args.out, result.field, result.decoder, result.sh)
    if args.log:
        write_loss_log(result.log, args.log)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_render(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _TrainedModel(dataset, *load_checkpoint(args.checkpoint))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = model.render(args.view, args.frame)
    write_png(out_dir / f"render_v{args.view}_t{args.frame}.png", out.color)
    write_imgf(out_dir / f"render_v{args.view}_t{args.frame}.imgf", out.color)
    write_imgf(out_dir / f"alpha_v{args.view}_t{args.frame}.imgf", out.alpha)
    write_imgf(out_dir / f"depth_v{args.view}_t{args.frame}.imgf", out.depth)
    print(f"renders written to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    model = _TrainedModel(dataset, *load_checkpoint(args.checkpoint))
    n, f = dataset.n_views, dataset.n_frames
    renders = np.zeros_like(dataset.images)
    trained = np.zeros_like(dataset.gt_positions)
    scene = dataset.canonical
    for t in range(f):
        dx, dr, ds = model.deformed_at(t)
        trained[t] = scene.positions + dx
        for i in range(n):
            cam = dataset.cameras[i]
            vecs = trained[t] - cam.center()
            dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
            colors, _ = eval_colors_batch(model.sh.fr, model.sh.l_max, model.sh.n_frames, dirs, float(t))
            dg = apply_deformation_batch(scene, dx, dr, ds, colors)
            renders[i, t] = splat_render(dg, cam).color
    report = eval_metrics(renders, dataset, trained)
    lines = []
    for key, val in report.items():
        if isinstance(val, list):
            val = " ".join(f"{v:.4f}" for v in val)
        elif isinstance(val, float):
            val = f"{val:.6f}"
        lines.append(f"{key} = {val}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def _cmd_schedule(args) -> int:
    sched = build_schedule(args.timesteps, args.beta_min, args.beta_max, args.beta_cond_max)
    csv = schedule_csv(sched)
    if args.out:
        Path(args.out).write_text(csv)
        print(f"schedule written to {args.out}")
    else:
        sys.stdout.write(csv)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="splat4d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a dataset from a scene spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("track", help="run feature-space tracking on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--denoiser", choices=("zero", "linear"), default="zero")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("reconstruct", help="fit the motion field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--views", default=None, help="comma-separated training views")
    p.add_argument("--denoiser", choices=("zero", "linear"), default="zero")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("render", help="render a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run every finite-difference suite")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("schedule", help="dump the noise schedule as CSV")
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--beta-cond-max", type=float, default=0.1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_schedule)
    return parser


def cli(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, Splat4DError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
