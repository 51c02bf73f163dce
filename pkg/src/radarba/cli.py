"""Command-line interface: run / simulate / eval / verify-loops.

Exit codes: 0 success, 2 invalid argument, 3 data error, 4 solver error,
5 structural error, 6 pipeline error, 10 internal error. Failures print a
single machine-readable line "ERROR <category>: <message>" to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio
from .config import RunConfig
from .errors import (
    DataError,
    InvalidArgumentError,
    PipelineError,
    RadarbaError,
    SolverError,
    StructuralError,
)
from .metrics import evaluate_trajectories

_EXIT_CODES = {
    "invalid-argument": 2,
    "data-error": 3,
    "solver-error": 4,
    "structural-error": 5,
    "pipeline-error": 6,
    "internal-error": 10,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radarba",
        description="Offline bundle-adjustment toolkit for 4D radar mapping",
    )
    parser.add_argument("--version", action="version", version=f"radarba {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="refine a dataset and export trajectory + map")
    p_run.add_argument("--dataset", required=True, help="dataset directory")
    p_run.add_argument("--config", help="RunConfig JSON file (defaults otherwise)")
    p_run.add_argument("--profile", choices=["coloradar", "snail"], help="parameter profile")
    p_run.add_argument("--out", required=True, help="output directory")

    p_sim = sub.add_parser("simulate", help="synthesize a dataset in the interchange format")
    p_sim.add_argument("--scenario", required=True, help="scenario name (see sim.SCENARIOS)")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--duration", type=float, help="override scenario duration (s)")
    p_sim.add_argument("--out", required=True, help="output dataset directory")

    p_eval = sub.add_parser("eval", help="trajectory / map metrics against ground truth")
    p_eval.add_argument("--est", required=True, help="estimated trajectory file")
    p_eval.add_argument("--gt", required=True, help="ground-truth trajectory file")
    p_eval.add_argument("--map-est", help="estimated map point cloud (PLY)")
    p_eval.add_argument("--map-gt", help="ground-truth map point cloud (PLY)")
    p_eval.add_argument("--out", help="write the metric report JSON here")

    p_ver = sub.add_parser("verify-loops", help="verify loop candidates by submap alignment")
    p_ver.add_argument("--dataset", required=True, help="dataset directory")
    p_ver.add_argument("--candidates", required=True, help="'query_id match_id score' lines")
    p_ver.add_argument("--config", help="RunConfig JSON file")
    p_ver.add_argument("--out", required=True, help="output file for verification results")
    return parser


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "profile", None):
        cfg = RunConfig.profile(args.profile)
    else:
        cfg = RunConfig()
    return cfg


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load_config(args)
    dataset = dataio.load_dataset(args.dataset)
    for w in dataset.warnings:
        print(f"warning: {w}", file=sys.stderr)
    result = run_pipeline(dataset, cfg, out_dir=args.out)
    print(f"keyframes: {len(result.keyframe_positions)} / {len(result.trajectory)} frames")
    print(f"verified loops: {len(result.verified_loops)}")
    trace = result.solve_report.objective_trace
    if trace:
        print(f"objective: {trace[0]:.6e} -> {trace[-1]:.6e}")
    print(f"outputs written to {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    import dataclasses

    from .sim import SCENARIOS, simulate_dataset

    if args.scenario not in SCENARIOS:
        raise InvalidArgumentError(
            f"unknown scenario '{args.scenario}' (available: {sorted(SCENARIOS)})"
        )
    scenario = dataclasses.replace(SCENARIOS[args.scenario], seed=args.seed)
    if args.duration is not None:
        scenario = dataclasses.replace(scenario, duration=args.duration)
    ds = simulate_dataset(scenario)
    root = dataio.write_dataset(args.out, ds)
    print(f"wrote {len(ds.frames)} frames, {len(ds.imu)} IMU samples to {root}")
    return 0


def _cmd_eval(args) -> int:
    est = dataio.read_trajectory(args.est)
    gt = dataio.read_trajectory(args.gt)
    map_est = dataio.read_ply(args.map_est) if args.map_est else None
    map_gt = dataio.read_ply(args.map_gt) if args.map_gt else None
    if (map_est is None) != (map_gt is None):
        raise InvalidArgumentError("--map-est and --map-gt must be given together")
    cfg = RunConfig()
    report = evaluate_trajectories(
        est, gt, map_est, map_gt,
        distances=cfg.rpe_distances,
        association_tol=cfg.ate_association_tol,
        chamfer_downsample=cfg.chamfer_downsample,
        chamfer_truncation=cfg.chamfer_truncation,
    )
    print(f"ATE RMSE: {report.ate_rmse:.6f} m ({report.matched_pairs} matched poses)")
    for d in sorted(report.rpe_rot_rmse_deg):
        print(f"RPE rot @ {d:g} m: {report.rpe_rot_rmse_deg[d]:.6f} deg")
    if report.rpe_rot_rmse_deg:
        print(f"RPE rot combined: {report.rpe_rot_combined_deg:.6f} deg")
    else:
        print("RPE rot: trajectory shorter than smallest distance bin")
    if map_est is not None:
        print(f"Chamfer-L1: {report.chamfer_l1_cm:.4f} cm")
    if args.out:
        dataio.write_metric_report(args.out, report)
        print(f"report written to {args.out}")
    return 0


def _cmd_verify_loops(args) -> int:
    from .pipeline import LoopCandidate, verify_loop

    cfg = _load_config(args)
    dataset = dataio.load_dataset(args.dataset)
    candidates = dataio.read_loop_candidates(args.candidates)
    poses = dataset.initial.poses()
    results = []
    for q, m, score in candidates:
        res = verify_loop(
            LoopCandidate(q, m, score), dataset.frames, poses, dataset.ext, cfg.voxel_size, cfg
        )
        results.append(res)
        status = "verified" if res.accepted else f"rejected ({res.reason})"
        print(f"loop {q} -> {m}: {status}")

    with open(args.out, "w") as f:
        f.write("# query_id match_id verified rmse inliers tx ty tz qx qy qz qw\n")
        for res in results:
            c = res.candidate
            if res.accepted:
                lp = res.loop
                p = lp.relative_pose.translation
                q4 = lp.relative_pose.rotation.quat_xyzw
                f.write(
                    f"{c.query_id} {c.match_id} 1 {lp.residual_rmse:.9g} {res.inliers} "
                    f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                    f"{q4[0]:.9g} {q4[1]:.9g} {q4[2]:.9g} {q4[3]:.9g}\n"
                )
            else:
                f.write(f"{c.query_id} {c.match_id} 0 nan {res.inliers} nan nan nan nan nan nan nan\n")
    print(f"results written to {args.out}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "simulate": _cmd_simulate,
    "eval": _cmd_eval,
    "verify-loops": _cmd_verify_loops,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except RadarbaError as e:
        print(f"ERROR {e.category}: {e}", file=sys.stderr)
        return _EXIT_CODES.get(e.category, 10)
    except OSError as e:
        print(f"ERROR data-error: {e}", file=sys.stderr)
        return _EXIT_CODES["data-error"]
    except Exception as e:  # pragma: no cover - safety net
        print(f"ERROR internal-error: {e}", file=sys.stderr)
        return _EXIT_CODES["internal-error"]


if __name__ == "__main__":
    sys.exit(main())
