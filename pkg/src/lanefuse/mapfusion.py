"""Multi-drive lane-line fusion: uncertainty propagation and greedy merging.

Relative positioning error of each drive is estimated against an implicit
element fitted to all drives, then used to scale the drive's control-point
covariances. Trajectories are grouped by spatial proximity and fused
pairwise within each group until nothing overlaps anymore.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .fusion import (
    FusionParams,
    OverlapReport,
    classify_run,
    detect_overlap,
    fuse_pair,
)
from .spline import BSplineTrajectory, dense_polyline, sample_arrays

log = logging.getLogger(__name__)


@dataclass
class LaneLineSet:
    trajectories: list = field(default_factory=list)
    drive_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.trajectories = list(self.trajectories)
        self.drive_ids = [int(d) for d in self.drive_ids]
        if len(self.trajectories) != len(self.drive_ids):
            raise ValueError("trajectories and drive_ids differ in length")

    def __len__(self):
        return len(self.trajectories)

    @classmethod
    def from_drives(cls, per_drive: Sequence[Sequence[BSplineTrajectory]], drive_ids=None):
        if drive_ids is None:
            drive_ids = range(len(per_drive))
        trajs, ids = [], []
        for d, lanes in zip(drive_ids, per_drive):
            trajs.extend(lanes)
            ids.extend([d] * len(lanes))
        return cls(trajs, ids)


@dataclass(frozen=True, eq=False)
class RelativeErrorEstimate:
    element_id: int
    drive_id: int
    error: np.ndarray
    magnitude: float


@dataclass(frozen=True, eq=False)
class LineElement:
    point: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class MapFusionParams:
    fusion: FusionParams = FusionParams()
    cluster_radius: float = 1.0
    samples_per_segment: int = 10
    max_fusions: int = 10_000


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# uncertainty propagation


def implicit_element(observations, kind: str = "lane") -> Union[LineElement, np.ndarray]:
    """Common element behind several drives' observations.

    Lane lines: total-least-squares line through all pooled points.
    Signs: the centroid of the observed positions.
    """
    obs = [np.atleast_2d(np.asarray(o, dtype=float)) for o in observations]
    if len(obs) < 2:
        raise InsufficientDataError("an implicit element needs at least two observations")
    pts = np.vstack(obs)
    centroid = pts.mean(axis=0)
    if kind == "sign":
        return centroid
    if kind != "lane":
        raise ValueError(f"unknown element kind {kind!r}")
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    d = vt[0]
    # canonical sign so the descriptor does not depend on observation order
    k = int(np.argmax(np.abs(d)))
    if d[k] < 0:
        d = -d
    return LineElement(centroid, d)


def line_displacements(points: np.ndarray, line: LineElement) -> np.ndarray:
    """Vectors from the line to each point, perpendicular to the line."""
    r = np.atleast_2d(points) - line.point
    return r - np.outer(r @ line.direction, line.direction)


def relative_error(observation, implicit, element_id: int = 0, drive_id: int = 0) -> RelativeErrorEstimate:
    if isinstance(implicit, LineElement):
        err = line_displacements(np.asarray(observation, dtype=float), implicit).mean(axis=0)
    else:
        obs = np.atleast_2d(np.asarray(observation, dtype=float)).mean(axis=0)
        err = obs - np.asarray(implicit, dtype=float)
    return RelativeErrorEstimate(int(element_id), int(drive_id), err, float(np.linalg.norm(err)))


def inflate_covariances(traj: BSplineTrajectory, magnitude, floor: float = 0.25) -> BSplineTrajectory:
    """Scale control-point covariances by ``max(magnitude, floor)``.

    ``magnitude`` is a scalar or one value per control point.
    """
    mag = np.asarray(magnitude, dtype=float)
    if np.any(mag < 0):
        raise ValueError("magnitude must be >= 0")
    scale = np.maximum(mag, floor)
    scale = np.broadcast_to(scale, (len(traj),))
    return traj.with_covariances(traj.covs * scale[:, None, None])


def estimate_relative_errors(
    lanes: LaneLineSet,
    piece_length: float = 30.0,
    radius: float = 1.0,
    samples_per_segment: int = 10,
):
    """Relative error per (piece of lane line, drive).

    Every trajectory is cut into pieces of about ``piece_length`` meters. The
    element behind a piece is formed by all samples of other drives within
    ``radius`` of it; pieces seen by a single drive get no estimate.

    Returns ``(estimates, per_point)`` where ``per_point[t]`` holds the
    magnitude for each control point of trajectory ``t`` (NaN where unknown).
    """
    polys = [dense_polyline(t, samples_per_segment) for t in lanes.trajectories]
    per_point = [np.full(len(t), np.nan) for t in lanes.trajectories]
    if not polys:
        return [], per_point
    owner = np.concatenate([np.full(len(p), k) for k, p in enumerate(polys)])
    drive = np.asarray(lanes.drive_ids)[owner]
    tree = cKDTree(np.vstack(polys))
    allpts = tree.data
    estimates = []
    element = 0
    for t, (traj, poly) in enumerate(zip(lanes.trajectories, polys)):
        d_self = lanes.drive_ids[t]
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
        npieces = max(1, int(round(s[-1] / piece_length)))
        piece_of = np.minimum((s / max(s[-1], 1e-12) * npieces).astype(int), npieces - 1)
        # control point k sits closest to sample k * samples_per_segment - samples_per_segment/2
        cp_sample = np.clip(
            np.arange(len(traj)) * samples_per_segment - samples_per_segment // 2, 0, len(poly) - 1
        )
        for p in range(npieces):
            mine = poly[piece_of == p]
            if len(mine) < 2:
                continue
            hits = tree.query_ball_point(mine, radius)
            idx = np.unique(np.concatenate([np.asarray(h, dtype=int) for h in hits]))
            idx = idx[drive[idx] != d_self]
            if len(idx) < 2:
                continue
            others = allpts[idx]
            line = implicit_element([mine, others], "lane")
            est = relative_error(mine, line, element, d_self)
            estimates.append(est)
            per_point[t][piece_of[cp_sample] == p] = est.magnitude
            element += 1
    return estimates, per_point


def propagate_uncertainty(lanes: LaneLineSet, floor: float = 0.25, **kw) -> LaneLineSet:
    """Inflate every trajectory by its estimated relative error. Control
    points without an estimate take the nearest estimated neighbour's value,
    and a trajectory with no estimate at all is left unchanged."""
    _, per_point = estimate_relative_errors(lanes, **kw)
    out = []
    for traj, mags in zip(lanes.trajectories, per_point):
        known = np.flatnonzero(~np.isnan(mags))
        if len(known) == 0:
            out.append(traj)
            continue
        nearest = known[np.abs(np.arange(len(mags))[:, None] - known[None, :]).argmin(axis=1)]
        out.append(inflate_covariances(traj, mags[nearest], floor))
    return LaneLineSet(out, lanes.drive_ids)


# ---------------------------------------------------------------------------
# grouping


def group_by_clusters(lanes: LaneLineSet, cluster_radius: float = 1.0, samples_per_segment: int = 10):
    """Connected components of trajectories linked by interpolated points
    closer than ``cluster_radius``. Groups and members are in input order."""
    if cluster_radius <= 0:
        raise ValueError("cluster_radius must be > 0")
    n = len(lanes)
    if n == 0:
        return []
    pts = [sample_arrays(t, samples_per_segment)[0] for t in lanes.trajectories]
    owner = np.concatenate([np.full(len(p), k) for k, p in enumerate(pts)])
    pairs = cKDTree(np.vstack(pts)).query_pairs(cluster_radius, output_type="ndarray")
    a, b = owner[pairs[:, 0]], owner[pairs[:, 1]]
    keep = a != b
    adj = coo_matrix((np.ones(int(keep.sum())), (a[keep], b[keep])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    groups: dict[int, list[int]] = {}
    for k, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(k)
    return sorted(groups.values(), key=lambda g: g[0])


# ---------------------------------------------------------------------------
# greedy fusion


def _contact_only(run, v_target: int, v_source: int) -> bool:
    # a run confined to the end segment of a longer trajectory is the two
    # shared control points left behind by an earlier truncation
    a, b = run.target_range
    i, j = run.source_range
    if (i == 0 and j == v_source - 1) or (a == 0 and b == v_target - 1):
        # one side lies wholly inside the run; fusing absorbs it
        return False
    t_end = b - a == 2 and v_target > 3 and (a == 0 or b == v_target - 1)
    s_end = j - i == 2 and v_source > 3 and (i == 0 or j == v_source - 1)
    return t_end or s_end


def fusable_report(target, source, params: FusionParams) -> Optional[OverlapReport]:
    """Overlap report with contact-only runs removed, or None."""
    rep = detect_overlap(
        target, source, params.gamma, params.min_overlap,
        params.grid_per_segment, params.pseudo_per_segment,
    )
    if rep.case_label is None:
        return None
    v_src = len(source)
    runs = tuple(r for r in rep.overlap_runs if not _contact_only(r, len(target), v_src))
    if not runs:
        return None
    if len(runs) == len(rep.overlap_runs):
        return rep
    label = "Case5" if len(runs) > 1 else classify_run(runs[0], len(target), v_src)
    return OverlapReport(label, runs, rep.source_reversed, rep.distances)


@dataclass
class _Item:
    traj: BSplineTrajectory
    drive: int
    uid: int


def _fuse_group(items: list[_Item], params: MapFusionParams, next_uid: int):
    fp = params.fusion
    no_overlap: set = set()
    forbidden: set = set()
    fusions = 0
    while fusions < params.max_fusions:
        found = False
        for t in range(len(items)):
            for s in range(t + 1, len(items)):
                key = (items[t].uid, items[s].uid)
                if key in no_overlap or key in forbidden:
                    continue
                rep = fusable_report(items[t].traj, items[s].traj, fp)
                if rep is None:
                    no_overlap.add(key)
                    continue
                res = fuse_pair(items[t].traj, items[s].traj, fp, rep)
                before = len(items[t].traj) + len(items[s].traj)
                after = sum(len(m) for m in res.merged)
                if len(res.merged) >= 2 and after >= before:
                    # no progress; leave both untouched
                    forbidden.add(key)
                    continue
                tgt, src = items[t], items[s]
                new = [_Item(res.merged[0], tgt.drive, next_uid)]
                next_uid += 1
                for extra in res.merged[1:]:
                    new.append(_Item(extra, src.drive, next_uid))
                    next_uid += 1
                items[t] = new[0]
                del items[s]
                items.extend(new[1:])
                fusions += 1
                found = True
                break
            if found:
                break
        if not found:
            break
    else:
        log.warning("greedy fusion stopped after %d fusions", fusions)
    return items, next_uid


def greedy_fuse(lanes: LaneLineSet, params: MapFusionParams = MapFusionParams()) -> LaneLineSet:
    """Fuse overlapping trajectories group by group; the output lists groups
    in order of their first member."""
    groups = group_by_clusters(lanes, params.cluster_radius, params.samples_per_segment)
    out_t, out_d = [], []
    uid = len(lanes)
    for g in groups:
        items = [_Item(lanes.trajectories[k], lanes.drive_ids[k], k) for k in g]
        items, uid = _fuse_group(items, params, uid)
        out_t.extend(it.traj for it in items)
        out_d.extend(it.drive for it in items)
    return LaneLineSet(out_t, out_d)
