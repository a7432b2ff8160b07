"""Cloud-side stages: multi-drive optimization and map fusion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mapfusion import LaneLineSet, MapFusionParams, greedy_fuse, propagate_uncertainty
from .maps import DriveMap
from .posegraph import (
    Factor,
    GraphState,
    OptimizerConfig,
    RegistrationRejected,
    gnss_information,
    odometry_information,
    pose_key,
    register_lane_submaps,
    sign_key,
    solve,
    transform_drive_map,
)
from .spline import dense_polyline

log = logging.getLogger(__name__)

LANE_CLASS, SIGN_CLASS = 0, 1


@dataclass(frozen=True)
class OptimizeParams:
    odometry_sigma_trans: float = 0.05
    odometry_sigma_rot_deg: float = 0.2
    gnss_sigma: float = 1.0
    submap_size: int = 12  # poses per rigid submap
    submap_radius: float = 40.0  # lane points within this distance of the center
    pair_distance: float = 15.0  # max distance between paired submap centers
    point_spacing: float = 1.0
    use_signs: bool = True
    use_loop_closures: bool = True
    optimizer: OptimizerConfig = OptimizerConfig(pose_dofs="yaw")


@dataclass(eq=False)
class OptimizeReport:
    stage1_cost: float = 0.0
    final_cost: float = 0.0
    loop_closures: int = 0
    rejected: int = 0
    iterations: list = field(default_factory=list)


def build_graph(drives: Sequence[DriveMap], params: OptimizeParams = OptimizeParams()):
    """Initial state and factors from uploaded drive data. Odometry is the
    relative motion between consecutive uploaded poses."""
    poses = {}
    factors = []
    info_o = odometry_information(params.odometry_sigma_trans, params.odometry_sigma_rot_deg)
    info_g = gnss_information(params.gnss_sigma)
    signs: dict = {}
    for dm in drives:
        d = dm.drive_id
        for k, T in dm.poses:
            poses[(d, k)] = T
        for (k0, T0), (k1, T1) in zip(dm.poses[:-1], dm.poses[1:]):
            factors.append(Factor("Odometry", [pose_key(d, k0), pose_key(d, k1)], T0.inverse() @ T1, info_o))
        for fix in dm.gnss_fixes:
            if fix.good and (d, fix.time_step) in poses:
                factors.append(Factor("Gnss", [pose_key(d, fix.time_step)], fix.position, info_g))
        if params.use_signs and dm.signs and dm.poses:
            R, p = dm.pose_arrays()
            tree = cKDTree(p)
            for s in dm.signs:
                _, i = tree.query(s.position)
                k = dm.poses[i][0]
                z = R[i].T @ (s.position - p[i])
                cov = R[i].T @ s.covariance @ R[i]
                factors.append(Factor("SignObservation", [pose_key(d, k), sign_key(s.sign_id)], z, np.linalg.inv(cov)))
                signs.setdefault(s.sign_id, []).append(s.position)
    landmarks = {sid: np.mean(v, axis=0) for sid, v in signs.items()}
    return GraphState(poses, landmarks), factors


def _submap_points(dm: DriveMap, spacing: float):
    pts, lab = [], []
    for traj in dm.lane_lines:
        poly = dense_polyline(traj, max(2, int(np.ceil(15.0 / spacing))))
        pts.append(poly)
        lab.append(np.full(len(poly), LANE_CLASS))
    for s in dm.signs:
        pts.append(s.position[None])
        lab.append(np.array([SIGN_CLASS]))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, int)
    return np.vstack(pts), np.concatenate(lab)


def loop_closures(drives: Sequence[DriveMap], params: OptimizeParams = OptimizeParams()):
    """Register submaps of every drive pair around submap centers.

    ``drives`` must already be expressed in the current best frame. Returns
    ``(factors, rejected_count)``.
    """
    clouds = [_submap_points(dm, params.point_spacing) for dm in drives]
    trees = [cKDTree(c[0]) if len(c[0]) else None for c in clouds]
    centers = []
    for dm in drives:
        n = len(dm.poses)
        idx = list(range(params.submap_size // 2, n, params.submap_size))
        if not idx and n:
            idx = [n // 2]
        centers.append(idx)
    factors, rejected = [], 0
    for u in range(len(drives)):
        for v in range(u + 1, len(drives)):
            if trees[u] is None or trees[v] is None:
                continue
            _, pv = drives[v].pose_arrays()
            tv = cKDTree(pv)
            for i in centers[u]:
                ku, Tu = drives[u].poses[i]
                dist, j = tv.query(Tu.translation)
                if dist > params.pair_distance:
                    continue
                kv, Tv = drives[v].poses[j]
                a_idx = trees[u].query_ball_point(Tu.translation, params.submap_radius)
                b_idx = trees[v].query_ball_point(Tv.translation, params.submap_radius)
                if len(a_idx) < 20 or len(b_idx) < 20:
                    continue
                a_idx, b_idx = np.sort(a_idx), np.sort(b_idx)
                A = Tu.inverse().act(clouds[u][0][a_idx])
                B = Tv.inverse().act(clouds[v][0][b_idx])
                guess = Tu.inverse() @ Tv
                try:
                    T, info = register_lane_submaps(
                        A, clouds[u][1][a_idx], B, clouds[v][1][b_idx], guess
                    )
                except RegistrationRejected as exc:
                    log.debug("registration %d:%d / %d:%d rejected: %s", u, ku, v, kv, exc)
                    rejected += 1
                    continue
                du, dv = drives[u].drive_id, drives[v].drive_id
                factors.append(Factor("LoopClosure", [pose_key(du, ku), pose_key(dv, kv)], T, info))
    return factors, rejected


def _apply(drives, state):
    return [transform_drive_map(dm, state) for dm in drives]


def optimize_drives(drives: Sequence[DriveMap], params: OptimizeParams = OptimizeParams()):
    """Two stages: odometry, GNSS and signs first, then again with loop
    closures registered on the stage-one maps. Returns the corrected drives
    and a report."""
    drives = list(drives)
    report = OptimizeReport()
    state, factors = build_graph(drives, params)
    res = solve(state, factors, params.optimizer)
    report.stage1_cost = res.final_cost
    report.iterations.append(res.iterations)
    state = res.state
    if params.use_loop_closures and len(drives) > 1:
        lc, rejected = loop_closures(_apply(drives, state), params)
        report.loop_closures, report.rejected = len(lc), rejected
        if lc:
            res = solve(state, factors + lc, params.optimizer)
            report.iterations.append(res.iterations)
            state = res.state
    report.final_cost = res.final_cost
    return _apply(drives, state), report


def fuse_drives(
    drives: Sequence[DriveMap],
    params: MapFusionParams = MapFusionParams(),
    inflate: bool = True,
) -> LaneLineSet:
    lanes = LaneLineSet.from_drives([dm.lane_lines for dm in drives], [dm.drive_id for dm in drives])
    if inflate:
        lanes = propagate_uncertainty(lanes, radius=params.cluster_radius)
    return greedy_fuse(lanes, params)
