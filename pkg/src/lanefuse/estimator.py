"""Single-lane recursive B-spline estimation from lane-marking detections.

Detections are explained by the interpolated point on the latest segment
(the last three control points) plus detection noise and a source-spread
term; their per-scan set is a Poisson point process.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import information_update_block, information_update_joint
from .spline import BSplineTrajectory, basis_weights, basis_weights_array

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class LaneDetectionPoint:
    position: np.ndarray
    noise_covariance: np.ndarray
    time_step: int = 0


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    source_spread_covariance: np.ndarray = field(default_factory=lambda: 0.05**2 * np.eye(3))
    poisson_rate: float = 20.0

    def __post_init__(self):
        if self.poisson_rate < 0:
            raise ValueError("poisson_rate must be >= 0")


def _latest_segment(traj: BSplineTrajectory, positions: np.ndarray, grid: int):
    """Best u on a closed grid over the last segment for each position, plus
    the interpolated means and covariances there."""
    i = traj.num_segments - 1
    us = np.linspace(0.0, 1.0, grid + 1)
    w = basis_weights_array(us)
    m = traj.means[i : i + 3]
    curve = w[:, 0:1] * m[0] + w[:, 1:2] * m[1] + w[:, 2:3] * m[2]
    diff = positions[:, None, :] - curve[None, :, :]
    k = np.argmin(np.einsum("pgk,pgk->pg", diff, diff), axis=1)
    wk = w[k]
    P = traj.covs[i : i + 3]
    cov = (
        wk[:, 0, None, None] ** 2 * P[0]
        + wk[:, 1, None, None] ** 2 * P[1]
        + wk[:, 2, None, None] ** 2 * P[2]
    )
    return us[k], curve[k], cov


def _gauss_logpdf(x, mean, cov):
    L = np.linalg.cholesky(cov)
    r = np.linalg.solve(L, x - mean)
    return -0.5 * (3 * LOG_2PI + r @ r) - np.log(np.diag(L)).sum()


def single_measurement_loglik(
    traj: BSplineTrajectory, det: LaneDetectionPoint, model: MeasurementModel, grid: int = 100
) -> float:
    pos = np.asarray(det.position, dtype=float)
    _, mean, pcov = _latest_segment(traj, pos[None, :], grid)
    cov = np.asarray(det.noise_covariance) + np.asarray(model.source_spread_covariance) + pcov[0]
    return float(_gauss_logpdf(pos, mean[0], cov))


def set_loglik(
    traj: BSplineTrajectory, dets: Sequence[LaneDetectionPoint], model: MeasurementModel, grid: int = 100
) -> float:
    """Log of the Poisson-process likelihood of one scan's detection set."""
    lam = float(model.poisson_rate)
    if not dets:
        return -lam
    log_lam = float(np.log(lam)) if lam > 0 else -np.inf
    terms = [single_measurement_loglik(traj, det, model, grid) for det in dets]
    # fsum is correctly rounded, so the result does not depend on the order
    return math.fsum([-lam, len(terms) * log_lam] + terms)


def gate_detections(traj, dets, model, gate: float = 3.0, grid: int = 100):
    """Detections whose Mahalanobis distance to the latest segment is within ``gate``.

    Returns ``(positions, noise_covs, us, mask)``.
    """
    if not dets:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros(0, dtype=bool)
    pos = np.array([d.position for d in dets], dtype=float)
    R = np.array([d.noise_covariance for d in dets], dtype=float) + np.asarray(model.source_spread_covariance)
    us, mean, pcov = _latest_segment(traj, pos, grid)
    S = R + pcov
    r = pos - mean
    md2 = np.einsum("ni,ni->n", r, np.linalg.solve(S, r[..., None])[..., 0])
    # detections clamped to a segment endpoint lie beyond it
    interior = (us > 0.0) & (us < 1.0)
    mask = (md2 <= gate * gate) & interior
    return pos[mask], R[mask], us[mask], mask


def recursive_update(
    traj: BSplineTrajectory,
    dets: Sequence[LaneDetectionPoint],
    model: MeasurementModel,
    gate: float = 3.0,
    grid: int = 100,
) -> BSplineTrajectory:
    """Refresh the latest three control points with gated detections."""
    pos, R, us, _ = gate_detections(traj, list(dets), model, gate, grid)
    if len(pos) == 0:
        return traj
    i = traj.num_segments - 1
    mean, cov = information_update_block(traj.means[i:], traj.covs[i:], pos, R, us, 1)
    means = np.array(traj.means)
    covs = np.array(traj.covs)
    for k in range(3):
        means[i + k] = mean[3 * k : 3 * k + 3]
        covs[i + k] = cov[3 * k : 3 * k + 3, 3 * k : 3 * k + 3]
    return BSplineTrajectory(means, covs, traj.birth_time)


class LaneEstimator:
    """Runs the recursive estimator for one lane line, scan by scan.

    The latest three control points are tracked jointly (a 9x9 covariance) so
    that a freshly extrapolated point carries the correlation with its
    neighbours; points leaving the window are frozen with their marginals.
    A trajectory is initialized from the first scan whose detections span at
    least ``min_init_extent`` control-point spacings.
    When the best-matching ``u`` of gated detections reaches ``extend_u`` on
    ``extend_scans`` consecutive scans, a control point extrapolated from the
    last two is appended, with process noise ``extend_inflation`` times the
    last point's covariance plus ``extend_sigma`` squared.
    """

    def __init__(
        self,
        model: MeasurementModel,
        spacing: float = 15.0,
        init_sigma: float = 1.0,
        gate: float = 3.0,
        extend_u: float = 0.9,
        extend_scans: int = 3,
        extend_inflation: float = 4.0,
        extend_sigma: float = 1.0,
        grid: int = 100,
        min_init_extent: float = 0.25,
    ):
        self.model = model
        self.spacing = spacing
        self.init_sigma = init_sigma
        self.gate = gate
        self.extend_u = extend_u
        self.extend_scans = extend_scans
        self.extend_inflation = extend_inflation
        self.extend_sigma = extend_sigma
        self.grid = grid
        self.min_init_extent = min_init_extent
        self.birth_time: Optional[int] = None
        self._frozen_means: list = []
        self._frozen_covs: list = []
        self._mean = None  # (9,)
        self._cov = None  # (9, 9)
        self._streak = 0
        self._reach = 0.0  # furthest gated u on the latest segment

    @property
    def traj(self) -> Optional[BSplineTrajectory]:
        if self._mean is None:
            return None
        means = np.vstack(self._frozen_means + [self._mean.reshape(3, 3)])
        covs = list(self._frozen_covs) + [
            self._cov[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] for k in range(3)
        ]
        return BSplineTrajectory(means, np.array(covs), self.birth_time)

    def _initialize(self, dets, heading) -> bool:
        pos = np.array([d.position for d in dets], dtype=float)
        if len(pos) < 3:
            return False
        if heading is None:
            c = pos - pos.mean(axis=0)
            direction = np.linalg.svd(c, full_matrices=False)[2][0]
        else:
            direction = np.asarray(heading, dtype=float)
        direction = direction / np.linalg.norm(direction)
        s = (pos - pos[0]) @ direction
        near = s <= s.min() + 2.0 * self.spacing
        pts = pos[near]
        if len(pts) < 3:
            pts = pos
        centroid = pts.mean(axis=0)
        axis = np.linalg.svd(pts - centroid, full_matrices=False)[2][0]
        if axis @ direction < 0:
            axis = -axis
        proj = (pts - centroid) @ axis
        if np.ptp(proj) < self.min_init_extent * self.spacing:
            # too short to fix the direction; wait for more of the line
            return False
        s0 = float(proj.min())
        h = self.spacing
        means = np.array([centroid + (s0 + k * h - 0.5 * h) * axis for k in range(3)])
        self._mean = means.reshape(9)
        self._cov = self.init_sigma**2 * np.eye(9)
        self.birth_time = int(dets[0].time_step)
        return True

    def _predict(self, pos):
        """Best u on the latest segment and the joint predictive mean/cov."""
        us = np.linspace(0.0, 1.0, self.grid + 1)
        w = basis_weights_array(us)
        m = self._mean.reshape(3, 3)
        curve = w[:, 0:1] * m[0] + w[:, 1:2] * m[1] + w[:, 2:3] * m[2]
        diff = pos[:, None, :] - curve[None, :, :]
        k = np.argmin(np.einsum("pgk,pgk->pg", diff, diff), axis=1)
        wk = w[k]
        C = self._cov.reshape(3, 3, 3, 3)
        pcov = np.einsum("na,nb,aibj->nij", wk, wk, C)
        return us[k], curve[k], pcov

    def step(self, dets: Sequence[LaneDetectionPoint], heading=None) -> None:
        dets = list(dets)
        if not dets:
            self._streak = 0
            return
        if self._mean is None and not self._initialize(dets, heading):
            return
        pos = np.array([d.position for d in dets], dtype=float)
        R = np.array([d.noise_covariance for d in dets], dtype=float) + np.asarray(
            self.model.source_spread_covariance
        )
        us, mean, pcov = self._predict(pos)
        r = pos - mean
        md2 = np.einsum("ni,ni->n", r, np.linalg.solve(R + pcov, r[..., None])[..., 0])
        mask = (md2 <= self.gate**2) & (us > 0.0) & (us < 1.0)
        if mask.any():
            self._mean, self._cov = information_update_joint(
                self._mean, self._cov, pos[mask], R[mask], us[mask], 1
            )
            us_new, _, _ = self._predict(pos[mask])
            self._reach = max(self._reach, float(us_new.max()))
            reached = us_new.max() >= self.extend_u
        else:
            # nothing explained by the segment; the lane may run past its end
            reached = bool((us >= 1.0).any())
            if reached:
                self._reach = 1.0
        self._streak = self._streak + 1 if reached else 0
        if self._streak >= self.extend_scans:
            self._extend()
            self._streak = 0

    def _extend(self) -> None:
        self._frozen_means.append(self._mean[:3].copy())
        self._frozen_covs.append(self._cov[:3, :3].copy())
        # (a, b, c) -> (b, c, 2c - b)
        I = np.eye(3)
        T = np.zeros((9, 9))
        T[0:3, 3:6] = I
        T[3:6, 6:9] = I
        T[6:9, 3:6] = -I
        T[6:9, 6:9] = 2 * I
        mean = T @ self._mean
        cov = T @ self._cov @ T.T
        cov[6:9, 6:9] += self.extend_inflation * self._cov[6:9, 6:9] + self.extend_sigma**2 * I
        self._mean = mean
        self._cov = 0.5 * (cov + cov.T)
        self._reach = 0.0

    def result(self) -> Optional[BSplineTrajectory]:
        """The trajectory with its end pulled back to the furthest observed
        point of the latest segment. The last control point is moved so the
        curve ends there with the same start and start tangent; an unobserved
        latest segment is dropped."""
        traj = self.traj
        if traj is None or self._reach >= 1.0:
            return traj
        means, covs = traj.means.copy(), traj.covs.copy()
        if self._reach <= 0.05:
            if len(means) > 3:
                return BSplineTrajectory(means[:-1], covs[:-1], traj.birth_time)
            return traj
        w = basis_weights(self._reach)
        end = w @ means[-3:]
        means[-1] = 2.0 * end - means[-2]
        return BSplineTrajectory(means, covs, traj.birth_time)


# detection log rows: time step, position (3), noise sigma (3), heading (3)
DETECTION_COLUMNS = 10


def track_lane_line(rows: np.ndarray, model: MeasurementModel, lost_after: int = 3, **estimator_kw):
    """Run estimators over one line's detection log.

    ``rows`` holds one detection per row (see ``DETECTION_COLUMNS``), sorted
    by time step. A track is closed once ``lost_after`` consecutive scans pass
    without detections and a new one starts with the next detection. Returns
    ``(trajectory, rows)`` per track that produced a trajectory, in birth
    order.
    """
    rows = np.asarray(rows, dtype=float).reshape(-1, DETECTION_COLUMNS)
    out = []
    est, used, last = None, [], None

    def close():
        if est is not None:
            traj = est.result()
            if traj is not None:
                out.append((traj, np.vstack(used)))

    ks = rows[:, 0].astype(int)
    starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    for a, b in zip(starts, np.r_[starts[1:], len(rows)]):
        k = int(ks[a])
        if est is not None and k - last - 1 >= lost_after:
            close()
            est, used = None, []
        if est is None:
            est = LaneEstimator(model, **estimator_kw)
        else:
            for _ in range(k - last - 1):
                est.step([])
        scan = rows[a:b]
        dets = [LaneDetectionPoint(r[1:4], np.diag(r[4:7] ** 2), k) for r in scan]
        est.step(dets, heading=scan[0, 7:10])
        used.append(scan)
        last = k
    close()
    return out
