"""Synthetic road layouts and noisy multi-drive observations.

Each drive follows a route polyline and takes a scan every ``scan_spacing``
meters. Lane-marking detections are drawn per visible line as a Poisson
process in the vehicle frame, then mapped to the world with the vehicle's
own (GNSS-aided, drifting) pose estimate and tracked line by line.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .estimator import MeasurementModel, track_lane_line
from .lie import PoseSE3, so3_exp
from .maps import DriveMap, GnssFix, GroundTruthMap, SignRecord, pose_list
from .posegraph import (
    Factor,
    GraphState,
    OptimizerConfig,
    gnss_information,
    odometry_information,
    pose_key,
    solve,
)

log = logging.getLogger(__name__)

TEMPLATES = ("straight", "curve", "split_merge", "traffic_island", "composite")
GT_SPACING = 0.5


class ScenarioError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    template: str = "split_merge"
    length: float = 600.0
    lanes: int = 2  # lanes; lines = lanes + 1
    lane_width: float = 3.5
    curve_radius: float = 400.0
    branch_curvature: float = 3.5e-4  # y = -c (x - x0)^2 for split/merge branches
    split_range: tuple = (120.0, 240.0)
    merge_range: tuple = (360.0, 480.0)
    island_range: tuple = (250.0, 350.0)
    island_width: float = 3.0
    sign_spacing: float = 80.0
    sign_offset: float = -4.0
    sign_height: float = 2.5
    seed: int = 0


@dataclass(frozen=True)
class NoiseConfig:
    gnss_sigma: float = 1.0
    gnss_correlation_length: float = 300.0
    gnss_white_sigma: float = 0.05
    detection_sigma: float = 0.1
    source_spread_sigma: float = 0.05
    poisson_rate: float = 20.0
    odometry_sigma_trans: float = 0.05
    odometry_sigma_rot_deg: float = 0.2
    sign_sigma: float = 0.2
    drift: bool = True


@dataclass(frozen=True)
class DriveSpec:
    route: str = "main"
    start: float = 0.0  # offsets trimmed off both ends of the route, meters
    end_trim: float = 0.0


@dataclass(frozen=True)
class SensorConfig:
    scan_spacing: float = 2.5
    range_ahead: float = 40.0
    lateral_range: float = 7.0
    sign_range: float = 40.0
    sign_lateral_range: float = 12.0
    lost_after: int = 3  # scans without detections before a track is closed
    spacing: float = 15.0
    pose_spacing: float = 10.0  # distance between uploaded poses, one odometry step

    @property
    def scans_per_pose(self) -> int:
        r = self.pose_spacing / self.scan_spacing
        if r < 1 or abs(r - round(r)) > 1e-9:
            raise SimulationError("pose_spacing must be a multiple of scan_spacing")
        return int(round(r))


# ---------------------------------------------------------------------------
# geometry


def _sample_curve(f, x0: float, x1: float, step: float = GT_SPACING) -> np.ndarray:
    n = int(round((x1 - x0) / step))
    x = x0 + np.arange(n + 1) * step
    x[-1] = x1
    y = f(x)
    return np.column_stack([x, y, np.zeros_like(x)])


def _offset(path: np.ndarray, d: float) -> np.ndarray:
    """Polyline shifted by ``d`` to the left of its direction of travel."""
    t = np.gradient(path[:, :2], axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    nrm = np.column_stack([-t[:, 1], t[:, 0], np.zeros(len(t))])
    return path + d * nrm


def _arc(radius: float, length: float, step: float = GT_SPACING, start=(0.0, 0.0), heading=0.0):
    n = int(round(length / step))
    s = np.arange(n + 1) * (length / n)
    th = heading + s / radius
    x = start[0] + radius * (np.sin(th) - np.sin(heading))
    y = start[1] - radius * (np.cos(th) - np.cos(heading))
    return np.column_stack([x, y, np.zeros_like(x)])


def _smooth_bump(x, a, b, height):
    u = np.clip((x - a) / (b - a), 0.0, 1.0)
    return height * 0.5 * (1 - np.cos(2 * np.pi * u))


@dataclass(eq=False)
class Scenario:
    """Ground truth plus the route polylines drives can follow."""

    spec: ScenarioSpec
    gt: GroundTruthMap
    routes: dict


def build_scenario(spec: ScenarioSpec) -> Scenario:
    if spec.template not in TEMPLATES:
        raise ScenarioError(f"unknown template {spec.template!r}; expected one of {TEMPLATES}")
    L, w = spec.length, spec.lane_width
    nl = spec.lanes + 1
    lines, tags = [], []
    routes = {}
    if spec.template in ("straight", "split_merge", "traffic_island"):
        center = _sample_curve(lambda x: 0.0 * x, 0.0, L)
    elif spec.template == "curve":
        center = _arc(spec.curve_radius, L)
    else:
        # straight lead-in, a left curve, then a right curve
        a = L / 3
        p1 = _sample_curve(lambda x: 0.0 * x, 0.0, a)
        p2 = _arc(spec.curve_radius, a, start=p1[-1, :2], heading=0.0)
        h2 = a / spec.curve_radius
        p3 = _arc(-spec.curve_radius, a, start=p2[-1, :2], heading=h2)
        center = np.vstack([p1, p2[1:], p3[1:]])

    for k in range(nl):
        lines.append(_offset(center, k * w) if k else center.copy())
        tags.append("plain")
    routes["main"] = _offset(center, 0.5 * w)

    if spec.template == "split_merge":
        c = spec.branch_curvature
        a0, a1 = spec.split_range
        b0, b1 = spec.merge_range
        if not (0 <= a0 < a1 <= L and 0 <= b0 < b1 <= L):
            raise ScenarioError("split/merge ranges must lie within the road")
        split = _sample_curve(lambda x: -c * (x - a0) ** 2, a0, a1)
        merge = _sample_curve(lambda x: -c * (b1 - x) ** 2, b0, b1)
        lines += [split, merge]
        tags += ["split-branch", "merge-branch"]
        main = routes["main"]
        ex = main[main[:, 0] <= a1].copy()
        sel = ex[:, 0] > a0
        ex[sel, 1] += -c * (ex[sel, 0] - a0) ** 2
        routes["exit"] = ex
        en = main[main[:, 0] >= b0].copy()
        sel = en[:, 0] < b1
        en[sel, 1] += -c * (b1 - en[sel, 0]) ** 2
        routes["entry"] = en
    elif spec.template == "traffic_island":
        if nl < 3:
            raise ScenarioError("traffic_island needs at least two lanes")
        i0, i1 = spec.island_range
        h = 0.5 * spec.island_width
        base = lines[1]
        left = base.copy()
        right = base.copy()
        left[:, 1] += _smooth_bump(base[:, 0], i0, i1, h)
        right[:, 1] -= _smooth_bump(base[:, 0], i0, i1, h)
        lines[1:2] = [left, right]
        tags[1:2] = ["island-side", "island-side"]
        routes["left"] = _offset(center, 1.5 * w)
        routes["left"][:, 1] += _smooth_bump(routes["left"][:, 0], i0, i1, h)
        routes["main"][:, 1] -= _smooth_bump(routes["main"][:, 0], i0, i1, h)

    # signs along the main road, ids in order of travel
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(center, axis=0), axis=1))])
    at = np.arange(0.5 * spec.sign_spacing, s[-1], spec.sign_spacing)
    side = _offset(center, spec.sign_offset)
    sx = np.interp(at, s, side[:, 0])
    sy = np.interp(at, s, side[:, 1])
    signs = [np.array([x, y, spec.sign_height]) for x, y in zip(sx, sy)]
    gt = GroundTruthMap(lines, signs, tags)
    return Scenario(spec, gt, routes)


def default_drive_specs(n: int, seed: int, template: str, max_offset: float = 40.0) -> list:
    """Route pattern main, exit, main, entry (or main/left on the island
    layout), with random start and end trims."""
    if template == "split_merge":
        pattern = ["main", "exit", "main", "entry"]
    elif template == "traffic_island":
        pattern = ["main", "left"]
    else:
        pattern = ["main"]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    specs = []
    for d in range(n):
        a, b = rng.uniform(0.0, max_offset, 2)
        specs.append(DriveSpec(pattern[d % len(pattern)], float(a), float(b)))
    return specs


# ---------------------------------------------------------------------------
# drives


def _route_poses(route: np.ndarray, start: float, end_trim: float, step: float):
    seg = np.linalg.norm(np.diff(route[:, :2], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if start < 0 or end_trim < 0 or start + end_trim >= s[-1] - step:
        raise SimulationError("drive leaves the route")
    at = np.arange(start, s[-1] - end_trim + 1e-9, step)
    x = np.interp(at, s, route[:, 0])
    y = np.interp(at, s, route[:, 1])
    dx = np.interp(at, s[:-1], np.diff(route[:, 0]) / np.maximum(seg, 1e-12))
    dy = np.interp(at, s[:-1], np.diff(route[:, 1]) / np.maximum(seg, 1e-12))
    yaw = np.arctan2(dy, dx)
    return at, np.column_stack([x, y, np.zeros_like(x)]), yaw


def _gauss_markov(rng, at: np.ndarray, sigma: float, length: float, dims: int = 3) -> np.ndarray:
    out = np.empty((len(at), dims))
    out[0] = rng.normal(0.0, sigma, dims)
    for k in range(1, len(at)):
        a = np.exp(-(at[k] - at[k - 1]) / length)
        out[k] = a * out[k - 1] + np.sqrt(1 - a * a) * rng.normal(0.0, sigma, dims)
    return out


def _vehicle_smoother(R_odo, p_odo, fixes, noise: NoiseConfig, drive_id: int, step_scale: float, spacing: float):
    """Odometry plus GNSS fixes smoothed by the pose-graph solver.

    Per-scan odometry noise is the per-pose value times ``step_scale``. The
    fixes share a slowly varying bias, so each one is down-weighted by the
    variance ratio of the mean of a first-order Gauss-Markov sequence.
    """
    n = len(p_odo)
    poses = {(drive_id, k): PoseSE3(R_odo[k], p_odo[k]) for k in range(n)}
    fs = []
    info_o = odometry_information(
        noise.odometry_sigma_trans * step_scale, noise.odometry_sigma_rot_deg * step_scale
    )
    for k in range(n - 1):
        Ti, Tj = poses[(drive_id, k)], poses[(drive_id, k + 1)]
        fs.append(Factor("Odometry", [pose_key(drive_id, k), pose_key(drive_id, k + 1)], Ti.inverse() @ Tj, info_o))
    a = np.exp(-spacing / noise.gnss_correlation_length)
    sg = np.hypot(noise.gnss_sigma * np.sqrt((1 + a) / (1 - a)), noise.gnss_white_sigma)
    info_g = gnss_information(sg)
    for k, z in fixes:
        fs.append(Factor("Gnss", [pose_key(drive_id, k)], z, info_g))
    # start from the odometry chain shifted onto the first fix
    shift = fixes[0][1] - p_odo[fixes[0][0]]
    init = GraphState({key: PoseSE3(T.rotation, T.translation + shift) for key, T in poses.items()})
    res = solve(init, fs, OptimizerConfig(max_iterations=50, pose_dofs="yaw"))
    R = np.array([res.state.poses[(drive_id, k)].rotation for k in range(n)])
    p = np.array([res.state.poses[(drive_id, k)].translation for k in range(n)])
    return R, p


def _visible(line: np.ndarray, R: np.ndarray, p: np.ndarray, ahead: float, lateral: float):
    local = (line - p) @ R
    return (local[:, 0] >= 0) & (local[:, 0] <= ahead) & (np.abs(local[:, 1]) < lateral), local


def simulate_drive(
    scenario: Scenario,
    drive_spec: DriveSpec,
    seed: int,
    drive_id: int = 0,
    noise: NoiseConfig = NoiseConfig(),
    sensor: SensorConfig = SensorConfig(),
    keep_detections: bool = False,
) -> DriveMap:
    gt = scenario.gt
    if drive_spec.route not in scenario.routes:
        raise SimulationError(f"route {drive_spec.route!r} not in scenario")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(drive_id)]))
    at, p_true, yaw = _route_poses(
        scenario.routes[drive_spec.route], drive_spec.start, drive_spec.end_trim, sensor.scan_spacing
    )
    n = len(at)
    stride = sensor.scans_per_pose
    R_true = so3_exp(np.column_stack([np.zeros(n), np.zeros(n), yaw]))

    if noise.drift:
        # dead reckoning from noisy relative poses; the per-pose odometry
        # noise is spread evenly over the scans inside one pose step
        scale = 1.0 / np.sqrt(stride)
        sr = np.deg2rad(noise.odometry_sigma_rot_deg) * scale
        R_odo = np.empty_like(R_true)
        p_odo = np.empty_like(p_true)
        R_odo[0], p_odo[0] = R_true[0], p_true[0]
        for k in range(n - 1):
            dR = R_true[k].T @ R_true[k + 1]
            dp = R_true[k].T @ (p_true[k + 1] - p_true[k])
            # roll and pitch are gravity-referenced, so only yaw drifts
            dR = dR @ so3_exp(np.array([0.0, 0.0, rng.normal(0.0, sr)]))
            dp = dp + rng.normal(0.0, noise.odometry_sigma_trans * scale, 3)
            R_odo[k + 1] = R_odo[k] @ dR
            p_odo[k + 1] = p_odo[k] + R_odo[k] @ dp
        bias = _gauss_markov(rng, at, noise.gnss_sigma, noise.gnss_correlation_length)
        gz = p_true + bias + rng.normal(0.0, noise.gnss_white_sigma, (n, 3))
        fixes = [(k, gz[k]) for k in range(n)]
        R_est, p_est = _vehicle_smoother(R_odo, p_odo, fixes, noise, drive_id, scale, sensor.scan_spacing)
    else:
        R_est, p_est = R_true.copy(), p_true.copy()
        fixes = [(k, p_true[k].copy()) for k in range(n)]

    model = MeasurementModel(
        source_spread_covariance=noise.source_spread_sigma**2 * np.eye(3),
        poisson_rate=noise.poisson_rate,
    )
    sig = noise.detection_sigma
    det_log: dict[int, list] = {}
    sign_obs: dict[int, list] = {}

    for k in range(n):
        Rt, pt = R_true[k], p_true[k]
        Re, pe = R_est[k], p_est[k]
        for lid, line in enumerate(gt.lane_lines):
            vis, local = _visible(line, Rt, pt, sensor.range_ahead, sensor.lateral_range)
            idx = np.flatnonzero(vis[:-1] & vis[1:])
            if len(idx) == 0 or noise.poisson_rate <= 0:
                continue
            lam = noise.poisson_rate * len(idx) * GT_SPACING / sensor.range_ahead
            m = int(rng.poisson(lam))
            if m == 0:
                continue
            pick = idx[rng.integers(0, len(idx), m)]
            u = rng.uniform(0.0, 1.0, m)[:, None]
            pts_local = (1 - u) * local[pick] + u * local[pick + 1]
            pts_local = pts_local + rng.normal(0.0, sig, (m, 3))
            world = pts_local @ Re.T + pe
            rows = np.column_stack(
                [np.full(m, k), world, np.full((m, 3), max(sig, 1e-3)), np.tile(Re[:, 0], (m, 1))]
            )
            det_log.setdefault(lid, []).append(rows)

        for sid, sp in enumerate(gt.signs):
            loc = Rt.T @ (sp - pt)
            if 0 <= loc[0] <= sensor.sign_range and abs(loc[1]) < sensor.sign_lateral_range:
                z = loc + rng.normal(0.0, noise.sign_sigma, 3)
                sign_obs.setdefault(sid, []).append(Re @ z + pe)

    finished = []  # (birth time, line id, trajectory, rows)
    for lid in sorted(det_log):
        tracks = track_lane_line(
            np.vstack(det_log[lid]), model, sensor.lost_after, spacing=sensor.spacing
        )
        finished.extend((t.birth_time, lid, t, r) for t, r in tracks)
    finished.sort(key=lambda item: item[:2])
    lanes = [t for _, _, t, _ in finished]
    lane_ids = [lid for _, lid, _, _ in finished]
    signs = []
    for sid in sorted(sign_obs):
        obs = np.array(sign_obs[sid])
        cov = max(noise.sign_sigma, 1e-3) ** 2 / len(obs) * np.eye(3)
        signs.append(SignRecord(sid, obs.mean(axis=0), cov))
    detections = [r for _, _, _, r in finished] if keep_detections else None
    up = range(0, n, stride)
    return DriveMap(
        drive_id,
        pose_list(R_est[::stride], p_est[::stride], up),
        lanes,
        signs,
        [GnssFix(k, np.asarray(z), True) for k, z in fixes if k % stride == 0],
        lane_ids,
        detections,
    )


def simulate_drives(
    scenario: Scenario,
    drive_specs: Sequence[DriveSpec],
    seed: int,
    noise: NoiseConfig = NoiseConfig(),
    sensor: SensorConfig = SensorConfig(),
    keep_detections: bool = False,
) -> list:
    return [
        simulate_drive(scenario, ds, seed, d, noise, sensor, keep_detections)
        for d, ds in enumerate(drive_specs)
    ]
