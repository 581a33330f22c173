"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .clocksync import bridge_from_lidar_pairs, build_hull_map, eval_map
from .geom import Pose, matrix_to_quat
from .kinematics import angular_rate_central_diff, ego_velocity_series
from .pgo import CascadeConfig, RobustLoss, cascaded_pgo
from .reversal import format_ns, reverse_stream, seconds_to_ns
from .synth import (
    ScenarioConfig,
    default_scenario,
    generate_truth,
    sample_clock,
    sample_imu,
    sample_poses,
    sample_radar,
    sample_times,
)
from .trajops import ate_rmse, forward_backward_report, recall_at_k
from .xcorr import CorrelationConfig, TimedVec3Series, run_correlation

log = logging.getLogger("trajsync")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _out(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def cmd_sync_clock(args):
    pairs = io.read_time_pairs(args.pairs)
    hull = build_hull_map(pairs)
    if args.hull:
        io.write_hull(args.hull, hull.vertices)
    mapped = eval_map(hull, pairs[:, 0])
    if args.bridge:
        lidar = io.read_time_pairs(args.bridge)
        mapped = eval_map(bridge_from_lidar_pairs(lidar[:, 0], lidar[:, 1]), mapped)
    lines = ["sensor_time,mapped_time"] + [f"{io.fmt_time(s)},{io.fmt_time(m)}" for s, m in zip(pairs[:, 0], mapped)]
    _out(args.output, "\n".join(lines) + "\n")


def cmd_estimate_offset(args):
    a = io.read_series(args.a)
    b = io.read_series(args.b)
    cfg = CorrelationConfig(M_a=args.ma, M_b=args.mb, tau=args.tau, buffer=args.buffer, mask_first_peak=args.mask_first_peak)
    R0 = np.eye(3)
    if args.r0:
        R0 = Pose.from_quat(np.zeros(3), [float(x) for x in args.r0.split(",")]).R
    res = run_correlation(a, b, R0, cfg)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    rec = {
        "t_d": res.t_d,
        "quat_xyzw": [float(x) for x in matrix_to_quat(res.R_AB)],
        "per_axis_offsets": res.per_axis_offsets,
        "peak_ratio": res.peak_ratio,
        "inlier_fraction": res.inlier_fraction,
        "axes_consistent": res.axes_consistent,
    }
    _out(args.output, json.dumps(rec, indent=2) + "\n")


def cmd_ego_velocity(args):
    scans = io.read_radar(args.scans, args.doppler_sign)
    series = ego_velocity_series(scans, inlier_threshold=args.threshold)
    if args.output in (None, "-"):
        sys.stdout.write("t,x,y,z\n")
        for t, v in zip(series.stamps, series.values):
            sys.stdout.write(",".join([io.fmt_time(t)] + [io.fmt_num(x) for x in v]) + "\n")
    else:
        io.write_series(args.output, series)


def cmd_reverse_stream(args):
    stream = io.read_stream(args.input)
    t_max = None if args.t_max is None else seconds_to_ns(args.t_max)
    rev, t_max = reverse_stream(stream, t_max)
    io.write_stream(args.output, rev)
    print(f"t_max {format_ns(t_max)}")


def _stats_text(stats) -> str:
    head = f"{'pass':<10}{'median_dp':>14}{'max_dp':>14}{'median_dR':>14}{'max_dR':>14}"
    rows = [head]
    for name, s in stats.items():
        rows.append(f"{name:<10}" + "".join(f"{v:>14.6f}" for v in s.as_row()))
    return "\n".join(rows) + "\n"


def cmd_average_traj(args):
    fwd = io.read_trajectory(args.forward)
    bwd = io.read_trajectory(args.backward)
    avg, stats = forward_backward_report(fwd, bwd, args.tol)
    io.write_trajectory(args.output, avg)
    sys.stdout.write(_stats_text(stats))
    if args.stats_csv:
        lines = ["pass,median_dp,max_dp,median_dR_deg,max_dR_deg"]
        lines += [",".join([k] + [io.fmt_num(v) for v in s.as_row()]) for k, s in stats.items()]
        Path(args.stats_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_pgo(args):
    g = io.read_graph(args.graph)
    if args.cauchy_scale is not None:
        g.loss = {**g.loss, "rel": RobustLoss("cauchy", args.cauchy_scale), "abs_pos": RobustLoss("cauchy", args.cauchy_scale)}
    if args.estimate_frame_transform:
        g.estimate_frame = True
        if g.frame_transform is None:
            g.frame_transform = Pose()
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    out, reports = cascaded_pgo(g, CascadeConfig(stages=stages, max_iters=args.max_iters))
    for r in reports:
        msg = f" ({r.message})" if r.message else ""
        print(f"stage {r.name}: iterations {r.iterations}, cost {r.costs[0]:.9g} -> {r.final_cost:.9g}{msg}", file=sys.stderr)
    io.write_trajectory(args.output, out.nodes)
    if out.frame_transform is not None and args.estimate_frame_transform:
        T = out.frame_transform
        print("frame " + " ".join(io.fmt_num(v) for v in [*T.p, *matrix_to_quat(T.R)]))


def cmd_eval_ate(args):
    ref = io.read_trajectory(args.reference)
    est = io.read_trajectory(args.estimate)
    print(f"{ate_rmse(est, ref, args.tol, args.align):.6f}")


def _parse_k(text):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(tok if tok.endswith("%") else int(tok))
    return out


def cmd_eval_recall(args):
    db = io.read_places(args.database)
    q = io.read_places(args.queries)
    res = recall_at_k(db, q, _parse_k(args.k), args.pos_threshold, args.heading_threshold)
    for k, v in res.recall_at.items():
        print(f"recall@{k} {v:.6f}")
    print(f"evaluable {int(res.evaluable.sum())}/{len(res.evaluable)}")


def cmd_synth(args, config):
    scen = config.get("scenario") if config else None
    cfg = ScenarioConfig.from_dict({**scen, "seed": args.seed}) if scen else default_scenario(seed=args.seed)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    truth = generate_truth(cfg)
    t_pose = sample_times(cfg, "pose")
    io.write_trajectory(out / "truth.txt", truth.sample(t_pose))
    imu = sample_imu(truth, cfg)
    io.write_stream(out / "imu.jsonl", imu)
    io.write_series(out / "gyro.csv", TimedVec3Series([r.t for r in imu], [r.gyro for r in imu]))
    # Pose stamps lag true time by the requested offset.
    poses = sample_poses(truth, cfg, stamp_offset=-args.offset)
    io.write_trajectory(out / "poses.txt", poses)
    io.write_series(out / "pose_rates.csv", angular_rate_central_diff(poses))
    if "radar" in cfg.rates:
        io.write_radar(out / "radar.csv", sample_radar(truth, cfg))
    io.write_time_pairs(out / "clock_pairs.csv", sample_clock(sample_times(cfg, "imu"), cfg))
    (out / "scenario.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote scenario to {out}")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajsync", description="Sensor time sync, trajectory and pose-graph tools.")
    p.add_argument("--seed", type=int, default=0, help="seed for synthetic data")
    p.add_argument("--config", help="JSON file; a section named after the subcommand supplies option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("sync-clock", help="hull-smoothed clock mapping")
    s.add_argument("pairs", help="CSV sensor_time,host_time")
    s.add_argument("--bridge", help="CSV of the bridge stream's gnss_time,host_time pairs")
    s.add_argument("--hull", help="write hull vertices CSV here")
    s.add_argument("-o", "--output", help="mapped times CSV (default stdout)")

    s = sub.add_parser("estimate-offset", help="time offset and rotation between two 3D series")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--ma", type=int, default=1, help="smoothing window of a (odd)")
    s.add_argument("--mb", type=int, default=1, help="smoothing window of b (odd)")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--buffer", type=float, default=1.0)
    s.add_argument("--mask-first-peak", action="store_true")
    s.add_argument("--r0", help="nominal rotation quaternion qx,qy,qz,qw")
    s.add_argument("-o", "--output")

    s = sub.add_parser("ego-velocity", help="radar Doppler ego velocity per scan")
    s.add_argument("scans")
    s.add_argument("--threshold", type=float, default=0.1, help="inlier threshold, m/s")
    s.add_argument("--doppler-sign", type=int, choices=(1, -1), default=1)
    s.add_argument("-o", "--output")

    s = sub.add_parser("reverse-stream", help="time-reverse a JSONL message stream")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--t-max", type=str, default=None, help="pivot stamp in seconds (default: latest stamp)")

    s = sub.add_parser("average-traj", help="average forward and backward passes")
    s.add_argument("forward")
    s.add_argument("backward")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--stats-csv")

    s = sub.add_parser("pgo", help="cascaded pose graph optimization")
    s.add_argument("graph")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--stages", default="rot,trans,full")
    s.add_argument("--cauchy-scale", type=float, default=None)
    s.add_argument("--estimate-frame-transform", action="store_true")
    s.add_argument("--max-iters", type=int, default=100)

    s = sub.add_parser("eval-ate", help="absolute trajectory error")
    s.add_argument("reference")
    s.add_argument("estimate")
    s.add_argument("--align", choices=("rigid", "none"), default="rigid")
    s.add_argument("--tol", type=float, default=None)

    s = sub.add_parser("eval-recall", help="place recognition recall@K")
    s.add_argument("database")
    s.add_argument("queries")
    s.add_argument("--k", default="1,5,10,1%")
    s.add_argument("--pos-threshold", type=float, default=9.0)
    s.add_argument("--heading-threshold", type=float, default=30.0)

    s = sub.add_parser("synth", help="write a synthetic scenario directory")
    s.add_argument("outdir")
    s.add_argument("--offset", type=float, default=0.0, help="lag applied to pose stamps, seconds")
    return p


COMMANDS = {
    "sync-clock": cmd_sync_clock,
    "estimate-offset": cmd_estimate_offset,
    "ego-velocity": cmd_ego_velocity,
    "reverse-stream": cmd_reverse_stream,
    "average-traj": cmd_average_traj,
    "pgo": cmd_pgo,
    "eval-ate": cmd_eval_ate,
    "eval-recall": cmd_eval_recall,
}


def _apply_config(parser, argv, config):
    section = config.get(argv_command(parser, argv), {}) if config else {}
    if not isinstance(section, dict):
        raise UsageError("config sections must be objects")
    return section


def argv_command(parser, argv):
    for tok in argv:
        if tok in COMMANDS or tok == "synth":
            return tok
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage().rstrip())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        config = io.load_json(args.config) if args.config else {}
        section = _apply_config(parser, argv, config)
        if section:
            # Config values act as defaults; explicit flags still win.
            sub = parser._subparsers._group_actions[0].choices[args.command]
            known = {a.dest for a in sub._actions}
            unknown = set(section) - known
            if unknown:
                raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
            sub.set_defaults(**section)
            args = parser.parse_args(argv)
        if args.command == "synth":
            cmd_synth(args, config)
        else:
            COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
