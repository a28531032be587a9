"""Command-line entry points: run, sweep-alpha, eval, render-fixture.

Configuration is a plain key=value text file plus flag overrides so an
experiment is fully described by its command line and config file.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np
from PIL import Image

from .dataset import (DatasetFormatError, InsufficientOverlapError,
                      TrajectoryEstimate, read_trajectory,
                      relative_pose_error, write_rpe_report,
                      write_trajectory)
from .pipeline import (MODES, RunConfig, run_synthetic, run_tum,
                       scene_groundtruth, write_diagnostics)
from .planes import organized_cloud_from_depth, segment_planes
from .synthetic import (FIXTURE_NAMES, load_scene, make_fixture,
                        render_depth, save_scene)


def _load_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        values = _load_config_file(args.config)
    mode = args.mode or values.get("mode", "points_and_planes")
    weighting = args.weighting or values.get("weighting", "probabilistic")
    alpha = args.alpha if args.alpha is not None \
        else float(values.get("alpha", 10.0))
    seed = args.seed if args.seed is not None \
        else int(values.get("seed", 0))
    return RunConfig(mode=mode, weighting=weighting, alpha=alpha, seed=seed)


def _resolve_input(source, n_frames, noise):
    """A TUM directory, a fixture name, or a scene file."""
    if os.path.isdir(source):
        return "tum", source
    if source in FIXTURE_NAMES:
        scene = make_fixture(source, n_frames=n_frames or 100, noise=noise)
        return "scene", scene
    if os.path.isfile(source):
        scene = load_scene(source)
        if noise:
            scene = scene.with_noise(True)
        return "scene", scene
    raise FileNotFoundError(
        f"input {source!r} is neither a dataset directory, a fixture name "
        f"({', '.join(FIXTURE_NAMES)}), nor a scene file")


def _run_once(source, config: RunConfig, n_frames, noise, output_dir,
              dump_masks=False):
    os.makedirs(output_dir, exist_ok=True)
    kind, payload = _resolve_input(source, n_frames, noise)
    if kind == "tum":
        traj, manifest = run_tum(payload, config, n_frames=n_frames)
        groundtruth = list(manifest.groundtruth)
    else:
        traj = run_synthetic(payload, config, n_frames=n_frames)
        groundtruth = scene_groundtruth(payload)
    write_trajectory(traj, os.path.join(output_dir, "trajectory.txt"))
    write_diagnostics(os.path.join(output_dir, "diagnostics.csv"), traj)
    if dump_masks and kind == "scene":
        _dump_label_images(payload, config, output_dir)
    rpe = None
    if groundtruth:
        try:
            rpe = relative_pose_error(traj, groundtruth)
            write_rpe_report(os.path.join(output_dir, "rpe.txt"),
                             rpe[0], rpe[1])
        except InsufficientOverlapError:
            pass
    return traj, rpe


def _dump_label_images(scene, config, output_dir, max_frames=1):
    from .geometry import PoseSE3
    for idx, (t, pose) in enumerate(scene.trajectory[:max_frames]):
        depth = render_depth(scene, pose)
        cloud = organized_cloud_from_depth(depth)
        labels = np.zeros(cloud.shape, dtype=np.uint8)
        for li, seg in enumerate(segment_planes(cloud,
                                                config.plane_extraction), 1):
            labels.reshape(-1)[seg.pixels] = li
        Image.fromarray(labels, mode="L").save(
            os.path.join(output_dir, f"labels_{idx:04d}.png"))


def _cmd_run(args) -> int:
    config = _build_run_config(args)
    try:
        traj, rpe = _run_once(args.input, config, args.frames, args.noise,
                              args.output_dir, args.dump_masks)
    except (FileNotFoundError, DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    fallbacks = sum(1 for r in traj.reports if r.fallback_used != "none")
    print(f"processed {len(traj.poses)} frames, "
          f"{fallbacks} velocity fallback(s)")
    if rpe is not None:
        print(f"rpe_translational_rmse {rpe[0]:.6f} m")
        print(f"rpe_rotational_rmse {rpe[1]:.6f} deg")
    return 0


def _cmd_sweep_alpha(args) -> int:
    config = _build_run_config(args)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else []
    os.makedirs(args.output_dir, exist_ok=True)
    out_path = os.path.join(args.output_dir, "alpha_sweep.csv")
    rows = []
    for alpha in alphas:
        cfg = replace(config, alpha=alpha)
        subdir = os.path.join(args.output_dir, f"alpha_{alpha:g}")
        try:
            _, rpe = _run_once(args.input, cfg, args.frames, args.noise,
                               subdir)
        except (FileNotFoundError, DatasetFormatError, ValueError) as exc:
            print(f"error at alpha={alpha:g}: {exc}", file=sys.stderr)
            continue
        if rpe is None:
            print(f"error at alpha={alpha:g}: no ground truth",
                  file=sys.stderr)
            continue
        rows.append((alpha, rpe[0], rpe[1]))
    with open(out_path, "w") as f:
        f.write("alpha,rpe_trans_m,rpe_rot_deg\n")
        for alpha, tr, rot in rows:
            f.write("%g,%.6f,%.6f\n" % (alpha, tr, rot))
    for alpha, tr, rot in rows:
        print(f"alpha={alpha:g} rpe_trans={tr:.6f} m rpe_rot={rot:.6f} deg")
    return 0


def _cmd_eval(args) -> int:
    try:
        est = read_trajectory(args.estimate)
        gt = read_trajectory(args.groundtruth)
        rpe = relative_pose_error(
            est, list(zip(gt.timestamps, gt.poses)), args.interval)
    except (DatasetFormatError, InsufficientOverlapError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("metric value unit")
    print(f"rpe_translational_rmse {rpe[0]:.6f} m")
    print(f"rpe_rotational_rmse {rpe[1]:.6f} deg")
    if args.output:
        write_rpe_report(args.output, rpe[0], rpe[1], args.interval)
    return 0


def _cmd_render_fixture(args) -> int:
    try:
        scene = make_fixture(args.name, n_frames=args.frames,
                             noise=args.noise)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.output_dir, exist_ok=True)
    save_scene(scene, os.path.join(args.output_dir, "scene.txt"))
    rng = np.random.default_rng(args.seed or 0)
    for idx in range(min(args.depth_frames, len(scene.trajectory))):
        t, pose = scene.trajectory[idx]
        depth = render_depth(scene, pose, rng if scene.noise_enabled else None)
        raw = np.clip(depth.data, 0, 65535).astype(np.uint16)
        Image.fromarray(raw).save(
            os.path.join(args.output_dir, f"depth_{idx:04d}.png"))
    print(f"wrote scene.txt and {min(args.depth_frames, len(scene.trajectory))}"
          f" depth frame(s) to {args.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbdvo",
        description="RGB-D odometry from uncertainty-weighted points and "
                    "planes")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--mode", choices=MODES, default=None,
                       help="feature combination (default points_and_planes)")
        p.add_argument("--weighting",
                       choices=("probabilistic", "deterministic"),
                       default=None,
                       help="residual weighting (default probabilistic)")
        p.add_argument("--alpha", type=float, default=None,
                       help="plane residual scale (default 10)")
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (default 0)")
        p.add_argument("--config", default=None,
                       help="key=value config file")
        p.add_argument("--output-dir", default="out",
                       help="directory for result files (default ./out)")
        p.add_argument("--frames", type=int, default=None,
                       help="limit the number of frames")
        p.add_argument("--noise", action="store_true",
                       help="enable synthetic sensor noise")

    p_run = sub.add_parser("run", help="run odometry on a dataset "
                                       "directory, fixture name, or scene "
                                       "file")
    p_run.add_argument("input")
    add_common(p_run)
    p_run.add_argument("--dump-masks", action="store_true",
                       help="export segmentation label images")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep-alpha",
                             help="evaluate RPE over a list of alpha values")
    p_sweep.add_argument("input")
    p_sweep.add_argument("--alphas", default="",
                         help="comma-separated alpha values")
    add_common(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep_alpha)

    p_eval = sub.add_parser("eval", help="RPE between two trajectory files")
    p_eval.add_argument("estimate")
    p_eval.add_argument("groundtruth")
    p_eval.add_argument("--interval", type=float, default=1.0)
    p_eval.add_argument("--output", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_render = sub.add_parser("render-fixture",
                              help="write a fixture scene file plus depth "
                                   "previews")
    p_render.add_argument("name", choices=FIXTURE_NAMES)
    p_render.add_argument("--output-dir", default="out")
    p_render.add_argument("--frames", type=int, default=100)
    p_render.add_argument("--depth-frames", type=int, default=1)
    p_render.add_argument("--noise", action="store_true")
    p_render.add_argument("--seed", type=int, default=0)
    p_render.set_defaults(func=_cmd_render_fixture)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
