"""Command-line entry points.

Exit codes: 0 success, 2 input error, 3 initialization failure, 4 solver failure.
``LILOC_LOG`` selects the log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from liloc.config import ConfigError, RunConfig
from liloc.descriptor import InitializationError
from liloc.evaluation import AteReport, EvaluationError, ate
from liloc.geometry import Pose, Rotation
from liloc.pipeline import (
    DRIFT_SCENARIO,
    Localizer,
    build_central,
    coarse_guess,
    initialize,
    mode_timeline,
    run_backend,
    run_frontend,
    transitions,
)
from liloc.pointcloud.io import ScanFormatError
from liloc.session import RLM, SessionFormatError, SessionStore
from liloc.simulator import SCENARIOS, RecordedSession, UnknownScenarioError, simulate
from liloc.simulator.dataset import SessionFormatError as RawSessionFormatError
from liloc.trajectory_io import TrajectoryFormatError, read_tum, write_tum

log = logging.getLogger("liloc")

EXIT_OK, EXIT_INPUT, EXIT_INIT, EXIT_SOLVER = 0, 2, 3, 4

INPUT_ERRORS = (ConfigError, SessionFormatError, RawSessionFormatError, UnknownScenarioError,
                TrajectoryFormatError, EvaluationError, ScanFormatError, OSError)


class InputError(ValueError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("LILOC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "immediate_update", False):
        changes["immediate_update"] = True
    if getattr(args, "ab_baseline", False):
        changes["ab_baseline"] = True
    return cfg.replace(**changes) if changes else cfg


def _source(args, cfg: RunConfig, role: str):
    if args.sim:
        return simulate(args.sim, cfg.seed, role)
    if not args.input:
        raise InputError("give an input session directory or --sim SCENARIO")
    return RecordedSession(args.input)


def _ground_truth(source) -> Optional[List[Pose]]:
    gt = source.ground_truth()
    return list(gt) if gt else None


# --- reports --------------------------------------------------------------------------


def _ate_or_none(est: Sequence[Pose], gt) -> Optional[AteReport]:
    if not gt:
        return None
    try:
        return ate(est, gt)
    except EvaluationError:
        return None


def write_report(path, loc: Localizer, report: Optional[AteReport], extra: Sequence[str] = ()) -> None:
    lines = ["# liloc run report", *extra, "", "[mode timeline]"]
    lines += [f"{m} {a} {b}" for m, a, b in mode_timeline(loc.records)]
    lines += ["", "[transitions]"]
    lines += [f"{a}->{b} at {k}" for a, b, k in transitions(loc.records)] or ["none"]
    lines += ["", "[factor counts]"]
    lines += [f"{kind} {n}" for kind, n in sorted(loc.added.items())]
    lines += ["", "[window sizes]"]
    windows = Counter((r.mode, r.window) for r in loc.records)
    lines += [f"{m} {w} {n}" for (m, w), n in sorted(windows.items())]
    lines += ["", "[solver]", f"failures {loc.solver_failures}", "", "[ate]"]
    lines += report.format().splitlines() if report else ["unavailable (no ground truth matched)"]
    Path(path).write_text("\n".join(lines) + "\n")


def write_timings(path, loc: Localizer) -> None:
    with open(path, "w") as fh:
        fh.write("index,timestamp,mode,overlap,window,scan_match,frontend_ms,match_ms,optimize_ms,marginalize_ms\n")
        for r in loc.records:
            fh.write(f"{r.index},{r.timestamp:.6f},{r.mode},{r.overlap:.4f},{r.window},{r.scan_match},"
                     f"{r.frontend_ms:.3f},{r.match_ms:.3f},{r.optimize_ms:.3f},{r.marginalize_ms:.3f}\n")


def write_plot_data(path, loc: Localizer, gt) -> None:
    """Whitespace columns for gnuplot: t x y z gt_x gt_y gt_z rlm."""
    gtd = {round(p.timestamp, 6): p for p in gt or []}
    with open(path, "w") as fh:
        fh.write("# t x y z gt_x gt_y gt_z rlm\n")
        for r in loc.records:
            p = loc.estimates[r.index]
            g = gtd.get(round(r.timestamp, 6))
            gx = g.translation if g is not None else np.full(3, np.nan)
            fh.write(f"{r.timestamp:.6f} {p.translation[0]:.6f} {p.translation[1]:.6f} {p.translation[2]:.6f} "
                     f"{gx[0]:.6f} {gx[1]:.6f} {gx[2]:.6f} {int(r.mode == RLM)}\n")


# --- commands -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    sess = simulate(args.sim, cfg.seed, args.role)
    sess.write(args.output, scenario=args.sim, route=args.role, limit=args.limit)
    n = len(sess) if args.limit is None else min(args.limit, len(sess))
    print(f"wrote {n} scans to {args.output}")
    return EXIT_OK


def cmd_build_central(args) -> int:
    cfg = _config(args)
    source = _source(args, cfg, "central")
    gt = _ground_truth(source)
    start = gt[0] if gt else Pose.identity()
    store, loc = build_central(source, cfg, start)
    out = store.save(args.output)
    report = _ate_or_none(loc.final_trajectory(), gt)
    write_report(Path(out) / "report.txt", loc, report, [f"keyframes {len(store.keyframes)}",
                                                         f"submaps {len(store.submaps)}"])
    print(f"central session: {len(store.keyframes)} keyframes, {len(store.submaps)} submaps -> {out}")
    return EXIT_SOLVER if loc.solver_failures else EXIT_OK


def _initial_guess(args, source, cfg: RunConfig, gt) -> Pose:
    t0 = float(source.scan_times[0])
    flags = (args.init_x, args.init_y, args.init_yaw)
    if any(v is not None for v in flags):
        if any(v is None for v in flags):
            raise InputError("--init-x, --init-y and --init-yaw go together")
        return Pose(Rotation.yaw(args.init_yaw), [args.init_x, args.init_y, 0.0], t0)
    if gt:
        return coarse_guess(gt[0], cfg)
    raise InputError("no ground truth to draw a start guess from; pass --init-x/--init-y/--init-yaw")


def cmd_localize(args) -> int:
    cfg = _config(args)
    store = SessionStore.load(args.central, cfg)
    source = _source(args, cfg, "subsidiary")
    gt = _ground_truth(source)
    coarse = _initial_guess(args, source, cfg, gt)
    try:
        init = initialize(source, store, coarse, cfg)
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT
    keyframes = run_frontend(source, cfg, init.pose)
    loc = run_backend(keyframes, cfg, source.imu, store, "b")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "traj_est.tum", loc.trajectory())
    report = _ate_or_none(loc.trajectory(), gt)
    extra = [f"initial keyframe {init.keyframe_id} fitness {init.fitness:.6f}", f"keyframes {len(loc.records)}"]
    write_report(out / "report.txt", loc, report, extra)
    write_timings(out / "timings.csv", loc)
    write_plot_data(out / "trajectory.dat", loc, gt)
    loc.staged.save(out / "map")
    print((out / "report.txt").read_text(), end="")
    return EXIT_SOLVER if loc.solver_failures else EXIT_OK


def cmd_evaluate(args) -> int:
    report = ate(read_tum(args.estimate), read_tum(args.ground_truth), align=args.align)
    print(report.format(), end="")
    return EXIT_OK


def cmd_ab_propagation(args) -> int:
    cfg = _config(args)
    if cfg.drift_scale == 0.0 and cfg.drift_yaw == 0.0:
        cfg = cfg.replace(**DRIFT_SCENARIO)
    central = simulate(args.sim, cfg.seed, "central")
    store, _ = build_central(central, cfg, central.ground_truth()[0])
    source = simulate(args.sim, cfg.seed, "subsidiary")
    gt = source.ground_truth()
    try:
        init = initialize(source, store, coarse_guess(gt[0], cfg), cfg)
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT
    keyframes = run_frontend(source, cfg, init.pose)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["variant xyz_rmse_m rot_rmse_rad mean_optimize_ms median_optimize_ms scan_match_factors"]
    failures = 0
    for name, baseline in (("propagation", False), ("single-edge", True)):
        loc = run_backend(keyframes, cfg.replace(ab_baseline=baseline), source.imu, store, "b")
        failures += loc.solver_failures
        rep = ate(loc.trajectory(), gt)
        opt = np.array([r.optimize_ms for r in loc.records])
        lines.append(f"{name} {rep.xyz_rmse:.6f} {rep.rot_rmse:.6f} {opt.mean():.3f} {np.median(opt):.3f} "
                     f"{sum(r.scan_match for r in loc.records)}")
        write_timings(out / f"timings_{name}.csv", loc)
        write_tum(out / f"traj_{name}.tum", loc.trajectory())
    (out / "ab_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_SOLVER if failures else EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liloc", description="Multi-session LiDAR-inertial localization")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sim_required=False):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int, help="simulator and guess seed")
        sp.add_argument("--sim", choices=tuple(SCENARIOS), required=sim_required, help="use a simulator scenario as input")

    s = sub.add_parser("simulate", help="write a simulated raw session to disk")
    common(s, sim_required=True)
    s.add_argument("--role", choices=("central", "subsidiary"), default="central")
    s.add_argument("--limit", type=int, help="write only the first N scans")
    s.add_argument("output")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-central", help="map a session and write it as the prior session")
    common(s)
    s.add_argument("input", nargs="?", help="raw session directory")
    s.add_argument("output")
    s.set_defaults(func=cmd_build_central)

    s = sub.add_parser("localize", help="localize a subsidiary session against a central one")
    common(s)
    s.add_argument("central", help="central session directory")
    s.add_argument("input", nargs="?", help="raw subsidiary session directory")
    s.add_argument("output")
    s.add_argument("--init-x", type=float)
    s.add_argument("--init-y", type=float)
    s.add_argument("--init-yaw", type=float, help="radians")
    s.add_argument("--mode", choices=("auto", "rlm", "ilm"))
    s.add_argument("--immediate-update", action="store_true", help="ILM submaps join the lookup store at once")
    s.add_argument("--ab-baseline", action="store_true", help="single direct scan-match edge per step")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", help="absolute trajectory error of a TUM estimate")
    s.add_argument("estimate")
    s.add_argument("ground_truth")
    s.add_argument("--align", action="store_true", help="rigid Umeyama alignment before scoring")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ab-propagation", help="propagated scan-match edges vs a single direct edge")
    common(s)
    s.set_defaults(sim="campus-loop")
    s.add_argument("output")
    s.set_defaults(func=cmd_ab_propagation)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
