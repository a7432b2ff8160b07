"""Pairwise Bayesian fusion of B-spline trajectories with different densities.

One trajectory (the source) is interpolated into pseudo measurements which
are associated to the other (the target) by grid search and folded into the
target's control points in information form. Partial overlaps are handled by
truncating the source and splicing the pieces onto the fused target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .spline import (
    BSplineTrajectory,
    GaussianControlPoint,
    basis_weights_array,
    sample_arrays,
)

log = logging.getLogger(__name__)

CASE_LABELS = ("Complete", "Case1", "Case2", "Case3", "Case4", "Case5")


@dataclass(frozen=True)
class FusionParams:
    gamma: float = 0.5  # overlap distance threshold, meters
    min_overlap: int = 5  # consecutive sub-gamma pseudo measurements for a run
    grid_per_segment: int = 10  # target grid density for association
    pseudo_per_segment: int = 10  # M, pseudo measurements per source segment


@dataclass(frozen=True, eq=False)
class PseudoMeasurement:
    position: np.ndarray
    noise_covariance: np.ndarray
    source_segment: int
    source_u: float


@dataclass(frozen=True)
class Association:
    target_segment: int
    target_u: float
    distance: float


@dataclass(frozen=True)
class OverlapRun:
    """One maximal run of pseudo measurements within ``gamma`` of the target.

    Ranges are inclusive control-point indices; ``pseudo_range`` indexes the
    source's pseudo-measurement sequence.
    """

    target_range: tuple[int, int]
    source_range: tuple[int, int]
    pseudo_range: tuple[int, int]


@dataclass(frozen=True, eq=False)
class OverlapReport:
    case_label: Optional[str]
    overlap_runs: tuple[OverlapRun, ...]
    source_reversed: bool = False
    distances: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class TraceAudit:
    """Per updated control point: prior and fused covariance trace."""

    prior_trace: float
    fused_trace: float
    informed: bool  # received at least one measurement with nonzero weight


@dataclass(frozen=True, eq=False)
class FusionResult:
    merged: list
    case_label: str
    truncated: bool
    audit: tuple[TraceAudit, ...] = ()


# ---------------------------------------------------------------------------
# pseudo measurements and association


def make_pseudo_measurements(source: BSplineTrajectory, M: int) -> list[PseudoMeasurement]:
    means, seg, uu, covs = sample_arrays(source, M, with_cov=True)
    return [
        PseudoMeasurement(means[k], covs[k], int(seg[k]), float(uu[k])) for k in range(len(seg))
    ]


def _grid(target: BSplineTrajectory, grid_per_segment: int):
    if grid_per_segment < 2:
        raise ValueError("grid_per_segment must be >= 2")
    return sample_arrays(target, grid_per_segment)


def _curve_at(traj: BSplineTrajectory, t: np.ndarray) -> tuple:
    """Curve points at global parameters ``t`` in [0, num_segments]."""
    nseg = traj.num_segments
    seg = np.minimum(np.floor(t).astype(int), nseg - 1)
    u = t - seg
    w = basis_weights_array(u.ravel()).reshape(u.shape + (3,))
    m = traj.means
    pts = w[..., 0:1] * m[seg] + w[..., 1:2] * m[seg + 1] + w[..., 2:3] * m[seg + 2]
    return pts, seg, u


def _refine(target, positions, seg, u, grid_per_segment: int, fine: int = 20):
    # search one grid cell either side of the grid winner on a finer grid
    nseg = target.num_segments
    t0 = seg + u
    off = np.linspace(-1.0, 1.0, fine + 1) / grid_per_segment
    # u stays in [0, 1) like the coarse grid
    t = np.clip(t0[:, None] + off[None, :], 0.0, np.nextafter(float(nseg), 0.0))
    pts, fseg, fu = _curve_at(target, t)
    d2 = np.einsum("nfk,nfk->nf", positions[:, None, :] - pts, positions[:, None, :] - pts)
    k = np.argmin(d2, axis=1)
    r = np.arange(len(k))
    return fseg[r, k], fu[r, k], np.sqrt(d2[r, k])


def associate_points(
    target: BSplineTrajectory, positions: np.ndarray, grid_per_segment: int, refine: bool = True
):
    """Nearest target grid point for each row of ``positions``.

    Returns ``(segments, us, distances)``. Ties resolve to the earliest grid
    point in (segment, u) order. With ``refine`` the winner is polished on a
    20x finer grid within one cell of it, which keeps distances free of the
    along-track discretization of the coarse grid.
    """
    grid, gseg, gu = _grid(target, grid_per_segment)
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = positions.shape[0]
    idx = np.empty(n, dtype=int)
    d2 = np.empty(n)
    chunk = max(1, 2_000_000 // max(1, grid.shape[0]))
    for s in range(0, n, chunk):
        diff = positions[s : s + chunk, None, :] - grid[None, :, :]
        dd = np.einsum("pgk,pgk->pg", diff, diff)
        k = np.argmin(dd, axis=1)
        idx[s : s + chunk] = k
        d2[s : s + chunk] = dd[np.arange(len(k)), k]
    if refine and n:
        return _refine(target, positions, gseg[idx], gu[idx], grid_per_segment)
    return gseg[idx], gu[idx], np.sqrt(d2)


def grid_search_associate(
    target: BSplineTrajectory, z: PseudoMeasurement, grid_per_segment: int = 10
) -> Association:
    pos = z.position if isinstance(z, PseudoMeasurement) else np.asarray(z, dtype=float)
    seg, u, d = associate_points(target, pos[None, :], grid_per_segment, refine=False)
    return Association(int(seg[0]), float(u[0]), float(d[0]))


# ---------------------------------------------------------------------------
# information-form update


def information_update_joint(prior_mean, prior_cov, zs, Rs, us, M: int):
    """Information-form update of a stacked 9-dim block with a full prior.

    ``y = Y m`` and ``Y = P^-1``; each measurement adds ``H^T R^-1 z / M`` and
    ``H^T R^-1 H / M``. Returns the fused mean and 9x9 covariance.
    """
    prior_mean = np.asarray(prior_mean, dtype=float).reshape(9)
    prior_cov = np.asarray(prior_cov, dtype=float).reshape(9, 9)
    Y = np.linalg.inv(prior_cov)
    y = Y @ prior_mean
    return _finish_update(Y, y, zs, Rs, us, M)


def information_update_block(prior_means, prior_covs, zs, Rs, us, M: int):
    """Same as :func:`information_update_joint` for three independent control
    points given as ``(3, 3)`` means and ``(3, 3, 3)`` covariances."""
    prior_means = np.asarray(prior_means, dtype=float).reshape(3, 3)
    prior_covs = np.asarray(prior_covs, dtype=float).reshape(3, 3, 3)
    Y = np.zeros((9, 9))
    y = np.zeros(9)
    for k in range(3):
        Pinv = np.linalg.inv(prior_covs[k])
        Y[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = Pinv
        y[3 * k : 3 * k + 3] = Pinv @ prior_means[k]
    return _finish_update(Y, y, zs, Rs, us, M)


def _finish_update(Y, y, zs, Rs, us, M):
    us = np.asarray(us, dtype=float).reshape(-1)
    if len(us):
        zs = np.asarray(zs, dtype=float).reshape(-1, 3)
        Rinv = np.linalg.inv(np.asarray(Rs, dtype=float).reshape(-1, 3, 3))
        w = basis_weights_array(us)  # (n, 3)
        # H^T R^-1 H has 3x3 blocks w_a w_b R^-1; H^T R^-1 z has blocks w_a R^-1 z
        Rz = np.einsum("nij,nj->ni", Rinv, zs)
        scale = 1.0 / M
        for a in range(3):
            y[3 * a : 3 * a + 3] += scale * np.einsum("n,ni->i", w[:, a], Rz)
            for b in range(3):
                Y[3 * a : 3 * a + 3, 3 * b : 3 * b + 3] += scale * np.einsum(
                    "n,nij->ij", w[:, a] * w[:, b], Rinv
                )
    Y = 0.5 * (Y + Y.T)
    try:
        L = np.linalg.cholesky(Y)
    except np.linalg.LinAlgError:
        ridge = 1e-9 * max(1.0, np.trace(Y) / 9.0)
        log.warning("fused information matrix not positive definite; adding ridge %.3g", ridge)
        Y = Y + ridge * np.eye(9)
        L = np.linalg.cholesky(Y)
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    cov = 0.5 * (cov + cov.T)
    mean = cov @ y
    return mean, cov


def information_update(prior, assigned, M: int) -> list[GaussianControlPoint]:
    """Update three consecutive control points with ``(PseudoMeasurement, u)`` pairs.

    Cross-covariances between the three updated points are dropped.
    """
    prior = list(prior)
    if len(prior) != 3:
        raise ValueError("information_update works on exactly three control points")
    if not assigned:
        return prior
    means = np.array([p.mean for p in prior])
    covs = np.array([p.covariance for p in prior])
    zs = np.array([pm.position for pm, _ in assigned])
    Rs = np.array([pm.noise_covariance for pm, _ in assigned])
    us = np.array([u for _, u in assigned], dtype=float)
    mean, cov = information_update_block(means, covs, zs, Rs, us, M)
    return [
        GaussianControlPoint(mean[3 * k : 3 * k + 3], cov[3 * k : 3 * k + 3, 3 * k : 3 * k + 3])
        for k in range(3)
    ]


def update_trajectory(target: BSplineTrajectory, zs, Rs, segs, us, M: int):
    """Sequential sweep: blocks are updated in segment order, each block
    starting from the already-updated control points of the previous one.

    Returns ``(means, covs, audit)`` for the whole target.
    """
    means = np.array(target.means)
    covs = np.array(target.covs)
    prior_tr = np.trace(covs, axis1=1, axis2=2).copy()
    informed = np.zeros(len(means), dtype=bool)
    touched = np.zeros(len(means), dtype=bool)
    segs = np.asarray(segs, dtype=int)
    us = np.asarray(us, dtype=float)
    zs = np.asarray(zs, dtype=float).reshape(-1, 3)
    Rs = np.asarray(Rs, dtype=float).reshape(-1, 3, 3)
    for i in np.unique(segs):
        sel = segs == i
        m, P = information_update_block(means[i : i + 3], covs[i : i + 3], zs[sel], Rs[sel], us[sel], M)
        for k in range(3):
            means[i + k] = m[3 * k : 3 * k + 3]
            covs[i + k] = P[3 * k : 3 * k + 3, 3 * k : 3 * k + 3]
        w = basis_weights_array(us[sel])
        informed[i : i + 3] |= (w > 0).any(axis=0)
        touched[i : i + 3] = True
    fused_tr = np.trace(covs, axis1=1, axis2=2)
    audit = tuple(
        TraceAudit(float(prior_tr[k]), float(fused_tr[k]), bool(informed[k]))
        for k in np.flatnonzero(touched)
    )
    return means, covs, audit


# ---------------------------------------------------------------------------
# overlap detection


def align_direction(target: BSplineTrajectory, source: BSplineTrajectory):
    """Reverse ``source`` if its end-to-end chord opposes the target's."""
    ct = target.means[-1] - target.means[0]
    cs = source.means[-1] - source.means[0]
    if float(ct @ cs) < 0.0:
        return source.reversed(), True
    return source, False


def _runs(mask: np.ndarray, min_len: int):
    runs = []
    n = len(mask)
    k = 0
    while k < n:
        if mask[k]:
            s = k
            while k < n and mask[k]:
                k += 1
            if k - s >= min_len:
                runs.append((s, k - 1))
        else:
            k += 1
    return runs


def _bboxes_close(a: BSplineTrajectory, b: BSplineTrajectory, margin: float) -> bool:
    lo_a, hi_a = a.means.min(axis=0), a.means.max(axis=0)
    lo_b, hi_b = b.means.min(axis=0), b.means.max(axis=0)
    return bool(np.all(lo_a - margin <= hi_b) and np.all(lo_b - margin <= hi_a))


def classify_run(run: OverlapRun, v_target: int, v_source: int) -> str:
    a, b = run.target_range
    i, j = run.source_range
    starts, ends = a == 0, b == v_target - 1
    prefix, suffix = i > 0, j < v_source - 1
    if not prefix and not suffix:
        return "Complete" if starts and ends else "Case1"
    if starts and ends:
        # the target lies inside the source
        return "Case1"
    if starts:
        return "Case2"
    if ends:
        return "Case3"
    return "Case4"


def detect_overlap(
    target: BSplineTrajectory,
    source: BSplineTrajectory,
    gamma: float = 0.5,
    min_overlap: int = 5,
    grid_per_segment: int = 10,
    pseudo_per_segment: int = 10,
) -> OverlapReport:
    src, rev = align_direction(target, source)
    # control points bound the curve, so a box test with margin gamma is safe
    if not _bboxes_close(target, src, gamma):
        return OverlapReport(None, (), rev)
    pos, pseg, _ = sample_arrays(src, pseudo_per_segment)
    tseg, _, dist = associate_points(target, pos, grid_per_segment)
    raw = _runs(dist < gamma, max(1, int(min_overlap)))

    # runs sharing a source segment cannot be separated by truncation
    merged: list[list[int]] = []
    for s, e in raw:
        if merged and pseg[s] <= pseg[merged[-1][1]]:
            merged[-1][1] = e
        else:
            merged.append([s, e])

    runs = []
    for s, e in merged:
        ts = tseg[s : e + 1]
        runs.append(
            OverlapRun(
                target_range=(int(ts.min()), int(ts.max()) + 2),
                source_range=(int(pseg[s]), int(pseg[e]) + 2),
                pseudo_range=(int(s), int(e)),
            )
        )
    if not runs:
        label = None
    elif len(runs) > 1:
        label = "Case5"
    else:
        label = classify_run(runs[0], len(target), len(src))
    return OverlapReport(label, tuple(runs), rev, dist)


# ---------------------------------------------------------------------------
# fusion of a pair


def _traj(means, covs, birth_time):
    return BSplineTrajectory(np.asarray(means), np.asarray(covs), birth_time)


def _fuse_single_run(target, src, run: OverlapRun, params: FusionParams, label: str) -> FusionResult:
    a, b = run.target_range
    i, j = run.source_range
    if b - a + 1 < 3:
        log.debug("overlap spans fewer than 3 target control points; skipped")
        return FusionResult([target, src], label, False)
    M = params.pseudo_per_segment
    p0, p1 = run.pseudo_range
    pos, _, _, pcov = sample_arrays(src, M, with_cov=True)
    pos, pcov = pos[p0 : p1 + 1], pcov[p0 : p1 + 1]
    tseg, tu, _ = associate_points(target, pos, params.grid_per_segment)
    means, covs, audit = update_trajectory(target, pos, pcov, tseg, tu, M)
    v1, v2 = len(target), len(src)
    sm, sc = src.means, src.covs
    bt = min(target.birth_time, src.birth_time)
    prefix, suffix = i > 0, j < v2 - 1
    starts, ends = a == 0, b == v1 - 1

    out = []
    if starts:
        head_m, head_c = sm[:i], sc[:i]
    else:
        head_m, head_c = sm[:0], sc[:0]
    if ends:
        tail_m, tail_c = sm[j + 1 :], sc[j + 1 :]
    else:
        tail_m, tail_c = sm[:0], sc[:0]
    main = _traj(
        np.concatenate([head_m, means, tail_m]),
        np.concatenate([head_c, covs, tail_c]),
        bt,
    )
    out.append(main)
    # pieces of the source not spliced onto the fused trajectory keep two
    # shared fused control points so the curves stay in contact
    if prefix and not starts:
        out.append(
            _traj(
                np.concatenate([sm[:i], means[a : a + 2]]),
                np.concatenate([sc[:i], covs[a : a + 2]]),
                src.birth_time,
            )
        )
    if suffix and not ends:
        out.append(
            _traj(
                np.concatenate([means[b - 1 : b + 1], sm[j + 1 :]]),
                np.concatenate([covs[b - 1 : b + 1], sc[j + 1 :]]),
                src.birth_time,
            )
        )
    return FusionResult(out, label, len(out) > 1, audit)


def split_source(src: BSplineTrajectory, runs: Sequence[OverlapRun]) -> list[BSplineTrajectory]:
    """Cut the source between consecutive runs. Neighbouring pieces share two
    control points so their curves meet at one point."""
    pieces = []
    start = 0
    for r1, r2 in zip(runs[:-1], runs[1:]):
        last_seg1 = r1.source_range[1] - 2
        first_seg2 = r2.source_range[0]
        g = (last_seg1 + first_seg2) // 2
        pieces.append(BSplineTrajectory(src.means[start : g + 3], src.covs[start : g + 3], src.birth_time))
        start = g + 1
    pieces.append(BSplineTrajectory(src.means[start:], src.covs[start:], src.birth_time))
    return pieces


def fuse_pair(
    target: BSplineTrajectory,
    source: BSplineTrajectory,
    params: FusionParams = FusionParams(),
    report: Optional[OverlapReport] = None,
) -> FusionResult:
    """Fuse ``source`` into ``target``.

    ``merged[0]`` is always the trajectory grown from the target; any further
    entries are truncated pieces of the source.
    """
    if report is None:
        report = detect_overlap(
            target, source, params.gamma, params.min_overlap,
            params.grid_per_segment, params.pseudo_per_segment,
        )
    if report.case_label is None:
        raise ValueError("trajectories do not overlap")
    src = source.reversed() if report.source_reversed else source
    if report.case_label != "Case5":
        return _fuse_single_run(target, src, report.overlap_runs[0], params, report.case_label)

    main = target
    extra: list[BSplineTrajectory] = []
    audit: list[TraceAudit] = []
    for piece in split_source(src, report.overlap_runs):
        rep = detect_overlap(
            main, piece, params.gamma, params.min_overlap,
            params.grid_per_segment, params.pseudo_per_segment,
        )
        if rep.case_label is None:
            extra.append(piece)
            continue
        res = fuse_pair(main, piece, params, rep)
        if len(res.merged) >= 2 and res.merged[1] is piece:
            # skipped run: piece untouched
            extra.append(piece)
            continue
        main = res.merged[0]
        extra.extend(res.merged[1:])
        audit.extend(res.audit)
    return FusionResult([main] + extra, "Case5", bool(extra), tuple(audit))
