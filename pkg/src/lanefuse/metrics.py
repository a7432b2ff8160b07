"""Absolute and relative accuracy of lane-line maps against ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .maps import GroundTruthMap
from .spline import BSplineTrajectory, dense_polyline


@dataclass(frozen=True)
class LineAccuracy:
    index: int
    length: float
    absolute_mean: float
    relative_mean: float
    matched_gt: int  # -1 when unmatched


@dataclass(frozen=True)
class AccuracyReport:
    absolute_mean: float
    absolute_std: float
    relative_mean: float
    relative_std: float
    per_line_breakdown: tuple = ()
    sample_step: float = 1.0
    window: float = 100.0
    planar: bool = False
    definition: str = (
        "absolute: distance of samples to the nearest ground-truth segment; "
        "relative: same after subtracting each window's mean error vector"
    )


@dataclass(frozen=True)
class CountReport:
    fused_count: int
    gt_count: int
    spurious: int
    missed: int


def _trajectories(fused):
    if hasattr(fused, "trajectories"):
        return list(fused.trajectories)
    return list(fused)


def even_samples(points: np.ndarray, step: float) -> np.ndarray:
    """Evenly spaced points along a polyline, both ends included, spacing at
    most ``step``. Symmetric under reversal of the polyline."""
    points = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return points[:1].copy()
    n = max(1, int(np.ceil(s[-1] / step - 1e-9)))
    at = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(at, s, points[:, d]) for d in range(points.shape[1])])


def spline_samples(traj: BSplineTrajectory, step: float = 1.0) -> np.ndarray:
    return even_samples(dense_polyline(traj, 20), step)


class SegmentIndex:
    """Nearest point on a set of polylines (exact point-to-segment)."""

    def __init__(self, polylines, planar: bool = False, k: int = 6):
        self.planar = planar
        dim = 2 if planar else 3
        polys = [np.asarray(p, dtype=float)[:, :dim] for p in polylines if len(p)]
        if not polys:
            raise ValueError("ground truth has no lane lines")
        self.a = np.vstack([p[:-1] for p in polys if len(p) > 1] or [np.zeros((0, dim))])
        self.b = np.vstack([p[1:] for p in polys if len(p) > 1] or [np.zeros((0, dim))])
        self.line = np.concatenate([np.full(len(p) - 1, i) for i, p in enumerate(polys) if len(p) > 1] or [np.zeros(0, int)])
        # single-vertex lines become degenerate segments
        singles = [(i, p[0]) for i, p in enumerate(polys) if len(p) == 1]
        if singles:
            pts = np.array([q for _, q in singles])
            self.a = np.vstack([self.a, pts])
            self.b = np.vstack([self.b, pts])
            self.line = np.concatenate([self.line, [i for i, _ in singles]])
        self.mid = 0.5 * (self.a + self.b)
        self.half = 0.5 * np.linalg.norm(self.b - self.a, axis=1).max(initial=0.0)
        self.tree = cKDTree(self.mid)
        self.k = min(k, len(self.mid))
        self.dim = dim

    def nearest(self, q: np.ndarray):
        """Returns ``(distance, nearest point, line index)`` for each query row."""
        q = np.atleast_2d(np.asarray(q, dtype=float))[:, : self.dim]
        d0, cand = self.tree.query(q, k=self.k)
        cand = np.asarray(cand).reshape(len(q), -1)
        d0 = np.asarray(d0).reshape(len(q), -1)
        best_d, best_p, best_l = self._eval(q, cand)
        # any segment that could beat the best has its midpoint within best + half
        need = np.flatnonzero(d0[:, -1] < best_d + self.half)
        for i in need:
            idx = self.tree.query_ball_point(q[i], best_d[i] + self.half + 1e-12)
            if idx:
                d, p, l = self._eval(q[i : i + 1], np.asarray(idx)[None, :])
                best_d[i], best_p[i], best_l[i] = d[0], p[0], l[0]
        return best_d, best_p, best_l

    def _eval(self, q, cand):
        a, b = self.a[cand], self.b[cand]
        ab = b - a
        den = np.einsum("nkd,nkd->nk", ab, ab)
        t = np.einsum("nkd,nkd->nk", q[:, None, :] - a, ab) / np.where(den > 0, den, 1.0)
        t = np.clip(np.where(den > 0, t, 0.0), 0.0, 1.0)
        p = a + t[..., None] * ab
        d = np.linalg.norm(q[:, None, :] - p, axis=2)
        j = np.argmin(d, axis=1)
        r = np.arange(len(q))
        return d[r, j], p[r, j], self.line[cand[r, j]]


def _per_line_errors(trajs, gt: GroundTruthMap, step: float, planar: bool):
    index = SegmentIndex(gt.lane_lines, planar)
    out = []
    for traj in trajs:
        s = spline_samples(traj, step)
        d, p, lid = index.nearest(s)
        q = s[:, : index.dim]
        out.append((q, d, q - p, lid))
    return index, out


def _relative(index: SegmentIndex, q, d, e, window: float, min_samples: int = 5):
    """Distances after per-window translation alignment. The alignment is
    skipped for windows with fewer than ``min_samples`` samples and
    whenever it would not lower the window's mean distance."""
    seg = np.linalg.norm(np.diff(q, axis=0), axis=1)
    length = seg.sum()
    nw = max(1, int(round(length / window)))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    w = np.minimum((s / max(length, 1e-12) * nw).astype(int), nw - 1)
    out = d.copy()
    for k in range(nw):
        sel = w == k
        if sel.sum() < min_samples:
            continue
        c = e[sel].mean(axis=0)
        dn, _, _ = index.nearest(q[sel] - c)
        if dn.mean() < d[sel].mean():
            out[sel] = dn
    return out


def absolute_error(fused, gt: GroundTruthMap, sample_step: float = 1.0, planar: bool = False):
    trajs = _trajectories(fused)
    if not trajs:
        raise ValueError("no fused lane lines")
    _, per = _per_line_errors(trajs, gt, sample_step, planar)
    d = np.concatenate([x[1] for x in per])
    return float(d.mean()), float(d.std())


def relative_error(fused, gt: GroundTruthMap, sample_step: float = 1.0, window: float = 100.0, planar: bool = False):
    trajs = _trajectories(fused)
    if not trajs:
        raise ValueError("no fused lane lines")
    index, per = _per_line_errors(trajs, gt, sample_step, planar)
    d = np.concatenate([_relative(index, q, dd, e, window) for q, dd, e, _ in per])
    return float(d.mean()), float(d.std())


def _mean_distance_to_lines(samples: np.ndarray, gt: GroundTruthMap, planar: bool):
    out = []
    for line in gt.lane_lines:
        d, _, _ = SegmentIndex([line], planar).nearest(samples)
        out.append(d.mean())
    return np.array(out)


def count_report(fused, gt: GroundTruthMap, threshold: float = 1.0, planar: bool = False) -> CountReport:
    """Match each fused line to the ground-truth line with the smallest mean
    distance (below ``threshold``). Extra matches and unmatched fused lines
    are spurious; unmatched ground-truth lines are missed."""
    trajs = _trajectories(fused)
    hits = np.zeros(len(gt.lane_lines), dtype=int)
    unmatched = 0
    for traj in trajs:
        md = _mean_distance_to_lines(spline_samples(traj, 1.0), gt, planar)
        j = int(np.argmin(md))
        if md[j] < threshold:
            hits[j] += 1
        else:
            unmatched += 1
    spurious = unmatched + int(np.maximum(hits - 1, 0).sum())
    missed = int((hits == 0).sum())
    return CountReport(len(trajs), len(gt.lane_lines), spurious, missed)


def accuracy_report(
    fused, gt: GroundTruthMap, sample_step: float = 1.0, window: float = 100.0, planar: bool = False
) -> AccuracyReport:
    trajs = _trajectories(fused)
    if not trajs:
        raise ValueError("no fused lane lines")
    index, per = _per_line_errors(trajs, gt, sample_step, planar)
    dabs, drel, rows = [], [], []
    for i, (q, d, e, _) in enumerate(per):
        r = _relative(index, q, d, e, window)
        dabs.append(d)
        drel.append(r)
        md = _mean_distance_to_lines(q, gt, planar)
        j = int(np.argmin(md))
        rows.append(
            LineAccuracy(
                i,
                float(np.linalg.norm(np.diff(q, axis=0), axis=1).sum()),
                float(d.mean()),
                float(r.mean()),
                j if md[j] < 1.0 else -1,
            )
        )
    dabs = np.concatenate(dabs)
    drel = np.concatenate(drel)
    return AccuracyReport(
        float(dabs.mean()), float(dabs.std()), float(drel.mean()), float(drel.std()),
        tuple(rows), sample_step, window, planar,
    )


def format_table(report: AccuracyReport, label: str = "fused map") -> str:
    dims = "2D" if report.planar else "3D"
    lines = [
        f"# {report.definition}",
        f"# sample step {report.sample_step:g} m, window {report.window:g} m, {dims}",
        "",
        f"{'Absolute error on lane lines (m)':<40}{'mu':>10}{'sigma':>10}",
        f"{label:<40}{report.absolute_mean:>10.3f}{report.absolute_std:>10.3f}",
        "",
        f"{'Relative error on lane lines (m)':<40}{'mu':>10}{'sigma':>10}",
        f"{label:<40}{report.relative_mean:>10.3f}{report.relative_std:>10.3f}",
    ]
    return "\n".join(lines)
