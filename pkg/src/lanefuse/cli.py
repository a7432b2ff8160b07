"""Command-line driver: simulate, estimate, optimize, fuse, evaluate, export.

Every stage reads and writes map exchange files. Outputs go below ``--out``,
which defaults to ``$LANEFUSE_OUT`` or the current directory. Exit status is
0 on success, 1 on a usage error and 2 on a data error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .estimator import MeasurementModel, track_lane_line
from .fusion import FusionParams
from .mapfusion import InsufficientDataError, LaneLineSet, MapFusionParams
from .maps import DriveMap
from .metrics import accuracy_report, count_report, format_table
from .pipeline import OptimizeParams, fuse_drives, optimize_drives
from .posegraph import GraphStructureError, OptimizationError, OptimizerConfig
from .sim import (
    NoiseConfig,
    ScenarioError,
    ScenarioSpec,
    SensorConfig,
    SimulationError,
    build_scenario,
    default_drive_specs,
    simulate_drives,
)

log = logging.getLogger("lanefuse")

OUT_ENV = "LANEFUSE_OUT"


class DataError(Exception):
    """Input that parses but cannot be used."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or ".")


def _positive(name, value, allow_zero=False):
    if value is None:
        return
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise DataError(f"--{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")


def _drive_files(path: Path) -> list:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"input not found: {path}")
    files = sorted(path.glob("*.json"))
    if not files:
        raise DataError(f"no map exchange files in {path}")
    return files


def _read_drives(path) -> tuple:
    drives, metas = [], []
    for f in _drive_files(Path(path)):
        _, dm, meta = io.read_map(f, expect="drive")
        drives.append(dm)
        metas.append(meta)
    ids = [d.drive_id for d in drives]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate drive ids in input")
    return drives, metas


def _write_drives(drives, out: Path, meta: dict) -> list:
    return [
        io.write_map(out / f"drive_{dm.drive_id:03d}.json", "drive", dm, meta)
        for dm in drives
    ]


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(args) -> int:
    if args.scenario:
        sf = io.load_scenario(args.scenario)
    else:
        sf = io.ScenarioFile(ScenarioSpec(args.template or "split_merge"), NoiseConfig(), SensorConfig())
    spec, noise, sensor = sf.scenario, sf.noise, sf.sensor
    seed = sf.seed if args.seed is None else args.seed
    n = sf.drives if args.drives is None else args.drives
    if args.template:
        spec = replace(spec, template=args.template)
    spec = replace(spec, seed=seed)
    over = {}
    for name in ("gnss_sigma", "poisson_rate", "detection_sigma"):
        v = getattr(args, name)
        _positive(name.replace("_", "-"), v, allow_zero=True)
        if v is not None:
            over[name] = v
    if args.no_drift:
        over["drift"] = False
    noise = replace(noise, **over)
    if n < 1:
        raise DataError(f"--drives must be >= 1, got {n}")
    scenario = build_scenario(spec)
    routes = list(sf.routes) if sf.routes and args.drives is None else default_drive_specs(n, seed, spec.template)
    drives = simulate_drives(scenario, routes, seed, noise, sensor, keep_detections=not args.no_detections)
    out = _out_dir(args)
    meta = {"stage": "simulate", "seed": seed, "scenario": spec, "noise": noise, "sensor": sensor, "routes": routes}
    _write_drives(drives, out / "drives", meta)
    io.write_map(out / "gt.json", "ground_truth", scenario.gt, {"stage": "simulate", "seed": seed, "scenario": spec})
    print(f"wrote {len(drives)} drives to {out / 'drives'} and ground truth to {out / 'gt.json'}")
    return 0


def cmd_estimate(args) -> int:
    _positive("spacing", args.spacing)
    _positive("gate", args.gate)
    _positive("poisson-rate", args.poisson_rate, allow_zero=True)
    _positive("source-spread", args.source_spread, allow_zero=True)
    drives, metas = _read_drives(args.input)
    model = MeasurementModel(args.source_spread**2 * np.eye(3), args.poisson_rate)
    out_drives = []
    for dm in drives:
        if dm.detections is None:
            raise DataError(f"drive {dm.drive_id} carries no detections")
        ids = dm.lane_ids if dm.lane_ids is not None else list(range(len(dm.detections)))
        found = []
        for lid, rows in zip(ids, dm.detections):
            if len(rows) == 0:
                continue
            for traj, used in track_lane_line(rows, model, args.lost_after, spacing=args.spacing, gate=args.gate):
                found.append((traj.birth_time, lid, traj, used))
        found.sort(key=lambda f: f[:2])
        out_drives.append(
            DriveMap(
                dm.drive_id, dm.poses, [f[2] for f in found], dm.signs, dm.gnss_fixes,
                [f[1] for f in found], [f[3] for f in found],
            )
        )
    params = {"spacing": args.spacing, "gate": args.gate, "poisson_rate": args.poisson_rate,
              "source_spread": args.source_spread, "lost_after": args.lost_after}
    out = _out_dir(args) / "estimated"
    _write_drives(out_drives, out, {"stage": "estimate", "parameters": params, "source": metas[0]})
    print(f"re-estimated {sum(len(d.lane_lines) for d in out_drives)} lane lines in {len(out_drives)} drives -> {out}")
    return 0


def cmd_optimize(args) -> int:
    _positive("gnss-sigma", args.gnss_sigma)
    drives, metas = _read_drives(args.input)
    params = OptimizeParams(
        gnss_sigma=args.gnss_sigma,
        use_signs=not args.no_signs,
        use_loop_closures=not args.no_loop_closures,
        optimizer=OptimizerConfig(pose_dofs=args.pose_dofs),
    )
    opt, rep = optimize_drives(drives, params)
    out = _out_dir(args) / "optimized"
    _write_drives(opt, out, {"stage": "optimize", "parameters": params, "source": metas[0]})
    print(
        f"optimized {len(opt)} drives: {rep.loop_closures} loop closures "
        f"({rep.rejected} rejected), cost {rep.stage1_cost:.3f} -> {rep.final_cost:.3f}; wrote {out}"
    )
    return 0


def cmd_fuse(args) -> int:
    _positive("gamma", args.gamma)
    _positive("cluster-radius", args.cluster_radius)
    for name in ("min_overlap", "pseudo_per_segment", "grid_per_segment"):
        if getattr(args, name) < 1:
            raise DataError(f"--{name.replace('_', '-')} must be >= 1")
    if args.grid_per_segment < 2:
        raise DataError("--grid-per-segment must be >= 2")
    drives, metas = _read_drives(args.input)
    fp = FusionParams(args.gamma, args.min_overlap, args.grid_per_segment, args.pseudo_per_segment)
    params = MapFusionParams(fp, args.cluster_radius)
    fused = fuse_drives(drives, params, inflate=not args.no_inflate)
    out = Path(args.output) if args.output else _out_dir(args) / "fused.json"
    meta = {"stage": "fuse", "parameters": params, "inflate": not args.no_inflate,
            "drives": [d.drive_id for d in drives], "source": metas[0]}
    io.write_map(out, "fused", fused, meta)
    print(f"fused {sum(len(d.lane_lines) for d in drives)} lane lines into {len(fused)}; wrote {out}")
    return 0


def _read_lanes(path) -> LaneLineSet:
    path = Path(path)
    if path.is_dir():
        drives, _ = _read_drives(path)
        return LaneLineSet.from_drives([d.lane_lines for d in drives], [d.drive_id for d in drives])
    kind, payload, _ = io.read_map(path)
    if kind == "fused":
        return payload
    if kind == "drive":
        return LaneLineSet(payload.lane_lines, [payload.drive_id] * len(payload.lane_lines))
    raise DataError(f"{path} holds {kind}, not lane lines")


def cmd_evaluate(args) -> int:
    _positive("sample-step", args.sample_step)
    _positive("window", args.window)
    lanes = _read_lanes(args.fused)
    _, gt, _ = io.read_map(args.gt, expect="ground_truth")
    if len(lanes) == 0:
        raise DataError("no lane lines to evaluate")
    rep = accuracy_report(lanes, gt, args.sample_step, args.window, args.planar)
    cnt = count_report(lanes, gt, planar=args.planar)
    text = format_table(rep, args.label)
    text += (
        f"\n\nlane lines: {cnt.fused_count} (ground truth {cnt.gt_count}), "
        f"spurious {cnt.spurious}, missed {cnt.missed}\n"
    )
    print(text, end="")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    return 0


def cmd_export_geojson(args) -> int:
    path = Path(args.input)
    signs = ()
    if path.is_file():
        kind, payload, _ = io.read_map(path)
        if kind == "drive":
            signs = payload.signs
    lanes = _read_lanes(path)
    out = Path(args.output) if args.output else _out_dir(args) / (path.stem + ".geojson")
    io.write_geojson(out, lanes, signs, args.origin)
    print(f"wrote {len(lanes)} lane lines to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lanefuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate drives over a synthetic layout")
    s.add_argument("--scenario", help="YAML scenario file")
    s.add_argument("--template", choices=["straight", "curve", "split_merge", "traffic_island", "composite"])
    s.add_argument("--drives", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--gnss-sigma", type=float)
    s.add_argument("--poisson-rate", type=float)
    s.add_argument("--detection-sigma", type=float)
    s.add_argument("--no-drift", action="store_true")
    s.add_argument("--no-detections", action="store_true", help="omit raw detections from drive files")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="re-run lane estimation from stored detections")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--spacing", type=float, default=15.0)
    s.add_argument("--gate", type=float, default=3.0)
    s.add_argument("--poisson-rate", type=float, default=20.0)
    s.add_argument("--source-spread", type=float, default=0.05)
    s.add_argument("--lost-after", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("optimize", help="multi-drive pose-graph optimization")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--gnss-sigma", type=float, default=1.0)
    s.add_argument("--pose-dofs", choices=["yaw", "full"], default="yaw")
    s.add_argument("--no-signs", action="store_true")
    s.add_argument("--no-loop-closures", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_optimize)

    d = FusionParams()
    s = sub.add_parser("fuse", help="fuse lane lines of several drives")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--gamma", type=float, default=d.gamma)
    s.add_argument("--min-overlap", type=int, default=d.min_overlap)
    s.add_argument("--pseudo-per-segment", type=int, default=d.pseudo_per_segment)
    s.add_argument("--grid-per-segment", type=int, default=d.grid_per_segment)
    s.add_argument("--cluster-radius", type=float, default=MapFusionParams().cluster_radius)
    s.add_argument("--no-inflate", action="store_true", help="skip relative-error covariance inflation")
    s.add_argument("--output", help="fused map file (default <out>/fused.json)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="accuracy against ground truth")
    s.add_argument("--fused", required=True, help="fused map, drive file or drive directory")
    s.add_argument("--gt", required=True)
    s.add_argument("--sample-step", type=float, default=1.0)
    s.add_argument("--window", type=float, default=100.0)
    s.add_argument("--planar", action="store_true", help="2D errors")
    s.add_argument("--label", default="fused map")
    s.add_argument("--report", help="also write the table here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-geojson", help="GeoJSON for plotting")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--output")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_geojson)
    return p


DATA_ERRORS = (
    DataError, io.FormatError, ScenarioError, SimulationError, InsufficientDataError,
    GraphStructureError, OptimizationError, OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"lanefuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
