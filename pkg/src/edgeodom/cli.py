"""Command-line entry point: run, eval, synth, select-debug.

Exit codes: 0 success, 1 usage error, 2 data error, 3 tracking failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import (
    DatasetError,
    TrajectoryParseError,
    load_sequence,
    load_trajectory,
    write_trajectory,
)
from .evaluation import EvaluationError, compute_ate, timing_summary
from .geometry import CameraIntrinsics, Pose
from .pipeline import TrackingFailure, run_sequence, write_diagnostics
from .selection import SelectionImpossibleError, select_edges
from .synthetic import (
    default_intrinsics,
    default_scene,
    generate_trajectory,
    materialize_tum,
    rich_scene,
    sparse_scene,
)
from .tracking import extract_edges, preprocess_frame

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRACKING = 3

# TUM freiburg-style defaults; synthetic sequences carry their size in the
# images themselves.
TUM_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def _build_config(args) -> RunConfig:
    overrides = []
    if args.dataset:
        overrides.append(f"dataset={args.dataset}")
    if args.output:
        overrides.append(f"output={args.output}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.no_selection:
        overrides.append("use_selection=false")
    if args.single_thread:
        overrides.append("single_thread=true")
    if args.window_size is not None:
        overrides.append(f"window_size={args.window_size}")
    if args.edges_k is not None:
        overrides.append(f"edges_k={args.edges_k}")
    overrides.extend(args.set or [])
    return load_config(args.config, overrides)


def _sequence_intrinsics(dataset: str) -> CameraIntrinsics:
    probe = next(iter(load_sequence(dataset)))
    h, w = probe.gray.shape
    if (w, h) == (640, 480):
        return TUM_INTRINSICS
    return default_intrinsics(w, h)


def cmd_run(args) -> int:
    try:
        config = _build_config(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not config.dataset:
        print("error: no dataset given (--dataset)", file=sys.stderr)
        return EXIT_USAGE
    try:
        intr = _sequence_intrinsics(config.dataset)
        records = load_sequence(config.dataset)
        system = run_sequence(records, intr, config)
    except (DatasetError, SelectionImpossibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrackingFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    write_trajectory(system.trajectory(), config.output)
    write_trajectory(system.keyframe_trajectory(), config.resolved_keyframe_output())
    write_diagnostics(system.diagnostics, config.resolved_diagnostics_output())
    summary = timing_summary(system.diagnostics)
    print(
        f"{len(system.records)} frames, "
        f"{summary['total']['mean_ms']:.1f} ms/frame "
        f"({summary['total']['hz']:.1f} Hz)"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = load_trajectory(args.estimated)
        gt = load_trajectory(args.ground_truth)
    except (TrajectoryParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        report = compute_ate(est, gt)
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(report)
    if args.csv:
        seq = Path(args.estimated).stem
        row = (
            f"{seq},{report.rmse:.6f},{report.mean:.6f},"
            f"{report.median:.6f},{report.max:.6f}"
        )
        Path(args.csv).write_text("sequence,rmse,mean,median,max\n" + row + "\n")
    if args.errors_csv:
        lines = ["index,error_m"] + [
            f"{i},{e:.6f}" for i, e in enumerate(report.per_pose_error)
        ]
        Path(args.errors_csv).write_text("\n".join(lines) + "\n")
    return EXIT_OK


_SCENES = {"default": default_scene, "rich": rich_scene, "sparse": sparse_scene}


def cmd_synth(args) -> int:
    scene = _SCENES[args.scene](args.seed or 0)
    intr = default_intrinsics(args.width, args.height)
    poses = generate_trajectory(args.kind, args.frames, step=args.step)
    try:
        materialize_tum(scene, poses, intr, args.out_dir)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {args.frames} frames to {args.out_dir}")
    return EXIT_OK


def cmd_select_debug(args) -> int:
    try:
        config = _build_config(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not config.dataset:
        print("error: no dataset given (--dataset)", file=sys.stderr)
        return EXIT_USAGE
    try:
        intr = _sequence_intrinsics(config.dataset)
        for i, rec in enumerate(load_sequence(config.dataset)):
            if i == args.frame:
                break
        else:
            print(f"error: frame {args.frame} out of range", file=sys.stderr)
            return EXIT_DATA
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    frame = preprocess_frame(rec.gray, rec.depth, rec.timestamp, config.tracking)
    candidates = extract_edges(frame)
    _, debug = select_edges(
        candidates,
        frame.pyramid[0],
        Pose.identity(),
        intr,
        config.selection,
        return_debug=True,
    )
    lines = ["x,y,magnitude,p,selected"]
    for j in range(len(debug.pix)):
        lines.append(
            f"{debug.pix[j, 0]:.0f},{debug.pix[j, 1]:.0f},"
            f"{debug.grad_mag[j]:.3f},{debug.probability[j]:.6f},"
            f"{int(debug.selected[j])}"
        )
    Path(args.out).write_text("\n".join(lines) + "\n")
    n_sel = int(np.count_nonzero(debug.selected))
    print(f"{n_sel} selected of {len(debug.pix)} candidates -> {args.out}")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--output", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--single-thread", action="store_true")
    p.add_argument("--window-size", type=int, default=None)
    p.add_argument("--edges-k", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeodom", description="Edge-based RGBD visual odometry"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run odometry over a sequence")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    p_eval.add_argument("estimated")
    p_eval.add_argument("ground_truth")
    p_eval.add_argument("--csv", type=str, default=None)
    p_eval.add_argument("--errors-csv", type=str, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="materialize a synthetic TUM sequence")
    p_synth.add_argument("kind", choices=("static", "line", "orbit"))
    p_synth.add_argument("out_dir")
    p_synth.add_argument("--frames", type=int, default=50)
    p_synth.add_argument("--step", type=float, default=0.01)
    p_synth.add_argument("--scene", choices=sorted(_SCENES), default="default")
    p_synth.add_argument("--width", type=int, default=320)
    p_synth.add_argument("--height", type=int, default=240)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_dbg = sub.add_parser("select-debug", help="dump selected vs rejected edges")
    _add_run_flags(p_dbg)
    p_dbg.add_argument("--frame", type=int, default=0)
    p_dbg.add_argument("--out", type=str, default="selection.csv")
    p_dbg.set_defaults(func=cmd_select_debug)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
