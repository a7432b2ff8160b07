"""Batched SO(3)/SE(3) helpers. Tangent vectors of SE(3) are ordered (rho, phi)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    return K


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    flat = phi.reshape(-1, 3)
    R = Rotation.from_rotvec(flat).as_matrix()
    return R.reshape(phi.shape[:-1] + (3, 3))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    w = Rotation.from_matrix(flat).as_rotvec()
    return w.reshape(R.shape[:-2] + (3,))


def _left_jacobian_coeffs(theta):
    # a = (1 - cos t) / t^2, b = (t - sin t) / t^3 with series near zero
    t2 = theta * theta
    small = theta < _SMALL
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / (ts * ts))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / (ts**3))
    return a, b


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _left_jacobian_coeffs(theta)
    K = hat(phi)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _SMALL
    ts = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        (1.0 - ts * np.sin(ts) / (2.0 * (1.0 - np.cos(ts)))) / (ts * ts),
    )
    K = hat(phi)
    return np.eye(3) - 0.5 * K + c[..., None, None] * (K @ K)


def se3_exp(xi: np.ndarray):
    """Returns ``(R, t)`` for tangent vectors ``(..., 6)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", left_jacobian(phi), rho)
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray
    # quaternion the pose was read from, returned verbatim by quaternion()
    source_quaternion: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.source_quaternion is not None:
            q = np.array(self.source_quaternion, dtype=float).reshape(4)
            q.flags.writeable = False
            object.__setattr__(self, "source_quaternion", q)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "PoseSE3":
        q = np.asarray(quat_xyzw, dtype=float)
        return cls(Rotation.from_quat(q).as_matrix(), translation, q)

    @classmethod
    def exp(cls, xi) -> "PoseSE3":
        R, t = se3_exp(np.asarray(xi, dtype=float))
        return cls(R, t)

    @classmethod
    def from_yaw(cls, yaw: float, translation) -> "PoseSE3":
        return cls(so3_exp(np.array([0.0, 0.0, yaw])), translation)

    def log(self) -> np.ndarray:
        return se3_log(self.rotation, self.translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w): the one the pose was read from, or
        else the one with w >= 0."""
        if self.source_quaternion is not None:
            return self.source_quaternion.copy()
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def act(self, points) -> np.ndarray:
        """Transform points ``(..., 3)`` into the outer frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __repr__(self):
        return f"PoseSE3(t={np.round(self.translation, 4).tolist()}, rotvec={np.round(so3_log(self.rotation), 5).tolist()})"
