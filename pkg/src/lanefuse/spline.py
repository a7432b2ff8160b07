"""Uniform quadratic B-splines whose control points carry Gaussian uncertainty.

Segment indices are 0-based: a trajectory with ``v`` control points has
segments ``0 .. v-3``; segment ``i`` is driven by control points ``i, i+1, i+2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

COV_FLOOR = 1e-9

# maps [1, u, u^2] to the three basis weights
BASIS_MATRIX = np.array(
    [
        [0.5, -1.0, 0.5],
        [0.5, 1.0, -1.0],
        [0.0, 0.0, 0.5],
    ]
)


def regularize_covariances(covs: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize and lift eigenvalues below ``floor``.

    Matrices that already satisfy the floor are returned bit-for-bit, which
    keeps serialization round trips exact.
    """
    covs = np.asarray(covs, dtype=float)
    single = covs.ndim == 2
    c = covs[None] if single else covs
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    w, V = np.linalg.eigh(c)
    bad = w.min(axis=-1) < floor
    if np.any(bad):
        c = c.copy()
        scale = np.maximum(np.abs(w[bad]).max(axis=-1), 1.0)
        target = (floor * 1.01 + 1e-14 * scale)[:, None]
        wb = np.maximum(w[bad], target)
        Vb = V[bad]
        fixed = np.einsum("nij,nj,nkj->nik", Vb, wb, Vb)
        c[bad] = 0.5 * (fixed + np.swapaxes(fixed, -1, -2))
    return c[0] if single else c


@dataclass(frozen=True, eq=False)
class GaussianControlPoint:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(3)
        P = regularize_covariances(np.array(self.covariance, dtype=float).reshape(3, 3))
        m.flags.writeable = False
        P.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", P)


@dataclass(frozen=True, eq=False)
class InterpolatedPoint:
    position_mean: np.ndarray
    position_covariance: np.ndarray
    segment_index: int
    local_parameter: float


class BSplineTrajectory:
    """Ordered control points (means ``(v, 3)``, covariances ``(v, 3, 3)``).

    Instances are treated as immutable; operations return new objects.
    """

    __slots__ = ("means", "covs", "birth_time")

    def __init__(self, means, covs=None, birth_time: int = 0):
        means = np.array(means, dtype=float).reshape(-1, 3)
        if means.shape[0] < 3:
            raise ValueError(f"a quadratic B-spline needs >= 3 control points, got {means.shape[0]}")
        if covs is None:
            covs = np.broadcast_to(np.eye(3), (means.shape[0], 3, 3))
        covs = regularize_covariances(np.array(covs, dtype=float).reshape(-1, 3, 3))
        if covs.shape[0] != means.shape[0]:
            raise ValueError("means and covariances differ in length")
        means.flags.writeable = False
        covs.flags.writeable = False
        self.means = means
        self.covs = covs
        self.birth_time = int(birth_time)

    @classmethod
    def from_control_points(cls, points: Sequence[GaussianControlPoint], birth_time: int = 0):
        return cls(
            np.array([p.mean for p in points]),
            np.array([p.covariance for p in points]),
            birth_time,
        )

    @property
    def control_points(self) -> list[GaussianControlPoint]:
        return [GaussianControlPoint(m, P) for m, P in zip(self.means, self.covs)]

    @property
    def num_control_points(self) -> int:
        return self.means.shape[0]

    @property
    def num_segments(self) -> int:
        return self.means.shape[0] - 2

    def reversed(self) -> "BSplineTrajectory":
        return BSplineTrajectory(self.means[::-1], self.covs[::-1], self.birth_time)

    def with_covariances(self, covs) -> "BSplineTrajectory":
        return BSplineTrajectory(self.means, covs, self.birth_time)

    def __len__(self):
        return self.means.shape[0]

    def __repr__(self):
        return f"BSplineTrajectory(v={len(self)}, birth_time={self.birth_time})"


def basis_weights(u: float) -> np.ndarray:
    """Weights of the three segment control points at local parameter ``u``."""
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"local parameter must lie in [0, 1], got {u}")
    return basis_weights_array(u)


def basis_weights_array(u: np.ndarray) -> np.ndarray:
    """Vectorized basis weights, shape ``(..., 3)``; no range checking.

    Expanded form of ``BASIS_MATRIX @ [1, u, u^2]`` so scalar and batched
    evaluation round identically.
    """
    u = np.asarray(u, dtype=float)
    return np.stack([0.5 - u + 0.5 * u * u, 0.5 + u - u * u, 0.5 * u * u], axis=-1)


def observation_matrix(u: float) -> np.ndarray:
    """H(u) = weights^T kron I3, shape (3, 9)."""
    return np.kron(basis_weights(u)[None, :], np.eye(3))


def _combine(w, a, b, c):
    # fixed evaluation order so that shared endpoints agree bit-for-bit
    return w[..., 0:1] * a + w[..., 1:2] * b + w[..., 2:3] * c


def interpolate(traj: BSplineTrajectory, segment_index: int, u: float) -> InterpolatedPoint:
    i = int(segment_index)
    if not 0 <= i < traj.num_segments:
        raise IndexError(f"segment {i} out of range for {traj.num_segments} segments")
    w = basis_weights(u)
    m = traj.means
    mean = _combine(w, m[i], m[i + 1], m[i + 2])
    P = traj.covs
    cov = w[0] ** 2 * P[i] + w[1] ** 2 * P[i + 1] + w[2] ** 2 * P[i + 2]
    return InterpolatedPoint(mean, cov, i, float(u))


def grid_parameters(samples_per_segment: int) -> np.ndarray:
    """Half-open grid (j-1)/n for j = 1..n."""
    n = int(samples_per_segment)
    if n < 1:
        raise ValueError("samples_per_segment must be >= 1")
    return np.arange(n) / n


def sample_arrays(traj: BSplineTrajectory, samples_per_segment: int, with_cov: bool = False):
    """Vectorized sampling on the half-open grid.

    Returns ``(means, segments, us)`` and, with ``with_cov``, the covariances.
    Points are ordered by (segment, u).
    """
    us = grid_parameters(samples_per_segment)
    nseg = traj.num_segments
    seg = np.repeat(np.arange(nseg), len(us))
    uu = np.tile(us, nseg)
    w = basis_weights_array(uu)
    m = traj.means
    means = _combine(w, m[seg], m[seg + 1], m[seg + 2])
    if not with_cov:
        return means, seg, uu
    P = traj.covs
    w2 = w**2
    covs = (
        w2[:, 0, None, None] * P[seg]
        + w2[:, 1, None, None] * P[seg + 1]
        + w2[:, 2, None, None] * P[seg + 2]
    )
    return means, seg, uu, covs


def sample_polyline(traj: BSplineTrajectory, samples_per_segment: int) -> list[InterpolatedPoint]:
    means, seg, uu, covs = sample_arrays(traj, samples_per_segment, with_cov=True)
    return [
        InterpolatedPoint(means[k], covs[k], int(seg[k]), float(uu[k])) for k in range(len(seg))
    ]


def dense_polyline(traj: BSplineTrajectory, samples_per_segment: int = 10) -> np.ndarray:
    """Sampled curve including its final endpoint, for geometry and plotting."""
    means, _, _ = sample_arrays(traj, samples_per_segment)
    m = traj.means
    end = 0.5 * m[-2] + 0.5 * m[-1]
    return np.vstack([means, end])


def resample_by_length(points: np.ndarray, step: float) -> np.ndarray:
    """Points spaced ``step`` apart along a polyline (last point kept if the
    remainder is at least half a step)."""
    points = np.asarray(points, dtype=float)
    seglen = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seglen)])
    total = s[-1]
    if total <= 0:
        return points[:1].copy()
    n = int(np.floor(total / step))
    targets = np.arange(n + 1) * step
    if total - targets[-1] >= 0.5 * step:
        targets = np.append(targets, total)
    return np.column_stack([np.interp(targets, s, points[:, d]) for d in range(points.shape[1])])


def arc_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())
