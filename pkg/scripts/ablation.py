"""Errors before and after each stage, with and without loop closures and
uncertainty inflation, on every road template.

    python scripts/ablation.py --seeds 3
"""
import argparse

import numpy as np

from lanefuse.mapfusion import LaneLineSet
from lanefuse.metrics import absolute_error, count_report, relative_error
from lanefuse.pipeline import OptimizeParams, fuse_drives, optimize_drives
from lanefuse.sim import TEMPLATES, ScenarioSpec, build_scenario, default_drive_specs, simulate_drives

VARIANTS = {
    "raw": None,
    "optimized": None,
    "fused": dict(loops=True, inflate=True),
    "fused, no loop closures": dict(loops=False, inflate=True),
    "fused, no inflation": dict(loops=True, inflate=False),
}


def evaluate(lanes, gt):
    return absolute_error(lanes, gt)[0], relative_error(lanes, gt)[0], count_report(lanes, gt).fused_count


def one(template, seed, drives):
    scenario = build_scenario(ScenarioSpec(template=template, seed=seed))
    maps = simulate_drives(scenario, default_drive_specs(drives, seed, template), seed)
    gt = scenario.gt
    out = {"raw": evaluate(LaneLineSet.from_drives([m.lane_lines for m in maps]), gt)}
    with_lc, _ = optimize_drives(maps)
    no_lc, _ = optimize_drives(maps, OptimizeParams(use_loop_closures=False))
    out["optimized"] = evaluate(LaneLineSet.from_drives([m.lane_lines for m in with_lc]), gt)
    for name, v in VARIANTS.items():
        if v is None:
            continue
        src = with_lc if v["loops"] else no_lc
        out[name] = evaluate(fuse_drives(src, inflate=v["inflate"]), gt)
    return out, len(gt.lane_lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--drives", type=int, default=8)
    ap.add_argument("--templates", nargs="*", default=list(TEMPLATES))
    args = ap.parse_args()
    for template in args.templates:
        acc = {name: [] for name in VARIANTS}
        for seed in range(args.seeds):
            res, n_gt = one(template, seed, args.drives)
            for name, v in res.items():
                acc[name].append(v)
        print(f"\n{template} ({n_gt} lines, {args.drives} drives, {args.seeds} seeds)")
        print(f"  {'stage':<26}{'abs':>8}{'rel':>8}{'count':>8}")
        for name, vals in acc.items():
            a, r, c = np.array(vals).T
            print(f"  {name:<26}{a.mean():>8.3f}{r.mean():>8.3f}{c.mean():>8.1f}")


if __name__ == "__main__":
    main()
