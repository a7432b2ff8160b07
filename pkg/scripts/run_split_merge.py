"""Duplicate elimination and error trend over seeds of the split/merge road.

    python scripts/run_split_merge.py --seeds 10 --drives 8
"""
import argparse
import time
from dataclasses import replace

import numpy as np

from lanefuse.metrics import accuracy_report, count_report
from lanefuse.pipeline import OptimizeParams, fuse_drives, optimize_drives
from lanefuse.sim import NoiseConfig, ScenarioSpec, build_scenario, default_drive_specs, simulate_drives


def run(seed, drives, template, noise, opt):
    t0 = time.perf_counter()
    scenario = build_scenario(ScenarioSpec(template=template, seed=seed))
    maps = simulate_drives(scenario, default_drive_specs(drives, seed, template), seed, noise)
    optimized, report = optimize_drives(maps, opt)
    fused = fuse_drives(optimized)
    acc = accuracy_report(fused, scenario.gt)
    cnt = count_report(fused, scenario.gt)
    return cnt, acc, report.loop_closures, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--drives", type=int, default=8)
    ap.add_argument("--template", default="split_merge")
    ap.add_argument("--gnss-sigma", type=float, default=1.0)
    ap.add_argument("--no-loop-closures", action="store_true")
    args = ap.parse_args()

    noise = NoiseConfig(gnss_sigma=args.gnss_sigma)
    opt = replace(OptimizeParams(gnss_sigma=args.gnss_sigma), use_loop_closures=not args.no_loop_closures)
    print(f"{'seed':>4} {'fused':>6} {'gt':>3} {'spur':>5} {'miss':>5} {'abs':>7} {'rel':>7} {'rel/abs':>8} {'lc':>4} {'sec':>6}")
    rows = []
    for seed in range(args.seeds):
        cnt, acc, lc, sec = run(seed, args.drives, args.template, noise, opt)
        ratio = acc.relative_mean / acc.absolute_mean
        rows.append((cnt.fused_count == cnt.gt_count, acc.absolute_mean, acc.relative_mean, ratio))
        print(
            f"{seed:>4} {cnt.fused_count:>6} {cnt.gt_count:>3} {cnt.spurious:>5} {cnt.missed:>5} "
            f"{acc.absolute_mean:>7.3f} {acc.relative_mean:>7.3f} {ratio:>8.3f} {lc:>4} {sec:>6.1f}"
        )
    hits, a, r, q = map(np.array, zip(*rows))
    print(f"\ncount matches: {int(hits.sum())}/{len(hits)}")
    print(f"mean abs {a.mean():.3f} m, mean rel {r.mean():.3f} m, worst rel/abs {q.max():.3f}")


if __name__ == "__main__":
    main()
