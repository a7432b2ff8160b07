"""Multi-drive pose-graph optimization with GNSS, odometry, sign landmarks
and lane-registration loop closures.

Poses are updated as ``R <- R Exp(dphi)``, ``p <- p + dp``; landmarks
additively. Costs use the squared Mahalanobis norm ``r^T Omega r``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix, diags, identity
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .lie import PoseSE3, hat, se3_log, so3_exp
from .maps import DriveMap, SignRecord
from .spline import BSplineTrajectory

log = logging.getLogger(__name__)

FACTOR_KINDS = ("Odometry", "Gnss", "LoopClosure", "SignObservation")
_DIM = {"Odometry": 6, "Gnss": 3, "LoopClosure": 6, "SignObservation": 3}


def pose_key(drive: int, step: int):
    return ("pose", int(drive), int(step))


def sign_key(sign_id: int):
    return ("sign", int(sign_id))


@dataclass(frozen=True, eq=False)
class Factor:
    kind: str
    endpoints: tuple
    measurement: object  # PoseSE3 or 3-vector
    information: np.ndarray

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        info = np.asarray(self.information, dtype=float)
        d = _DIM[self.kind]
        if info.shape != (d, d):
            raise ValueError(f"{self.kind} information must be {d}x{d}")
        object.__setattr__(self, "endpoints", tuple(tuple(e) for e in self.endpoints))
        object.__setattr__(self, "information", info)
        if self.kind in ("Gnss", "SignObservation"):
            object.__setattr__(self, "measurement", np.asarray(self.measurement, dtype=float).reshape(3))


@dataclass(eq=False)
class GraphState:
    poses: dict = field(default_factory=dict)  # (drive, step) -> PoseSE3
    sign_landmarks: dict = field(default_factory=dict)  # sign id -> 3-vector

    def copy(self) -> "GraphState":
        return GraphState(dict(self.poses), {k: np.array(v) for k, v in self.sign_landmarks.items()})

    def has(self, key) -> bool:
        if key[0] == "pose":
            return (key[1], key[2]) in self.poses
        return key[1] in self.sign_landmarks


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    huber_delta: float = 1.0
    initial_lambda: float = 1e-4
    max_lambda: float = 1e12
    fd_step: float = 1e-6
    # "full": 6-DoF poses; "yaw": translation plus rotation about the world
    # vertical, for gravity-referenced roll and pitch
    pose_dofs: str = "full"


@dataclass(eq=False)
class OptimizationResult:
    state: GraphState
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


class GraphStructureError(ValueError):
    pass


class OptimizationError(RuntimeError):
    pass


class RegistrationRejected(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# default information matrices


def odometry_information(sigma_trans: float = 0.05, sigma_rot_deg: float = 0.2) -> np.ndarray:
    sr = np.deg2rad(sigma_rot_deg)
    return np.diag([1 / sigma_trans**2] * 3 + [1 / sr**2] * 3)


def gnss_information(sigma: float = 1.0) -> np.ndarray:
    return np.eye(3) / sigma**2


# ---------------------------------------------------------------------------
# residuals (batched over factors of one kind)


def _rel_residual(Ri, pi, Rj, pj, Rz, pz):
    # Log(Z^-1 Ti^-1 Tj)
    Rx = np.swapaxes(Ri, -1, -2) @ Rj
    px = np.einsum("nji,nj->ni", Ri, pj - pi)
    Rzt = np.swapaxes(Rz, -1, -2)
    Re = Rzt @ Rx
    pe = np.einsum("nij,nj->ni", Rzt, px - pz)
    return se3_log(Re, pe)


def _sign_residual(Rk, pk, l, z):
    return np.einsum("nji,nj->ni", Rk, l - pk) - z


def residual(factor: Factor, state: GraphState) -> np.ndarray:
    for e in factor.endpoints:
        if not state.has(e):
            raise GraphStructureError(f"factor endpoint {e} missing from state")
    if factor.kind in ("Odometry", "LoopClosure"):
        Ti = state.poses[factor.endpoints[0][1:]]
        Tj = state.poses[factor.endpoints[1][1:]]
        Z = factor.measurement
        return _rel_residual(
            Ti.rotation[None], Ti.translation[None], Tj.rotation[None], Tj.translation[None],
            Z.rotation[None], Z.translation[None],
        )[0]
    if factor.kind == "Gnss":
        return state.poses[factor.endpoints[0][1:]].translation - factor.measurement
    T = state.poses[factor.endpoints[0][1:]]
    l = state.sign_landmarks[factor.endpoints[1][1]]
    return _sign_residual(T.rotation[None], T.translation[None], np.asarray(l)[None], factor.measurement[None])[0]


# ---------------------------------------------------------------------------
# packed problem


class _Problem:
    """Arrays for all vertices and factors, grouped by kind."""

    def __init__(self, state: GraphState, factors: Sequence[Factor], fixed=(), pose_dofs: str = "full"):
        if pose_dofs not in ("full", "yaw"):
            raise ValueError(f"pose_dofs must be 'full' or 'yaw', got {pose_dofs!r}")
        self.pdim = 6 if pose_dofs == "full" else 4
        fixed = {tuple(f) for f in fixed}
        self.pose_keys = sorted(state.poses)
        self.sign_keys = sorted(state.sign_landmarks)
        pidx = {k: i for i, k in enumerate(self.pose_keys)}
        sidx = {k: i for i, k in enumerate(self.sign_keys)}
        self.R = np.array([state.poses[k].rotation for k in self.pose_keys]).reshape(-1, 3, 3)
        self.p = np.array([state.poses[k].translation for k in self.pose_keys]).reshape(-1, 3)
        self.L = np.array([state.sign_landmarks[k] for k in self.sign_keys], dtype=float).reshape(-1, 3)

        # variable offsets; fixed vertices get -1
        off = 0
        self.pose_off = np.full(len(self.pose_keys), -1)
        for i, k in enumerate(self.pose_keys):
            if pose_key(*k) not in fixed:
                self.pose_off[i] = off
                off += self.pdim
        self.sign_off = np.full(len(self.sign_keys), -1)
        for i, k in enumerate(self.sign_keys):
            if sign_key(k) not in fixed:
                self.sign_off[i] = off
                off += 3
        self.nvar = off

        def lookup(e):
            try:
                return pidx[e[1:]] if e[0] == "pose" else sidx[e[1]]
            except KeyError:
                raise GraphStructureError(f"factor endpoint {e} missing from state") from None

        self.groups = {}
        for kind in FACTOR_KINDS:
            fs = [f for f in factors if f.kind == kind]
            if not fs:
                continue
            g = {"n": len(fs)}
            g["a"] = np.array([lookup(f.endpoints[0]) for f in fs])
            if kind != "Gnss":
                g["b"] = np.array([lookup(f.endpoints[1]) for f in fs])
            if kind in ("Odometry", "LoopClosure"):
                g["Rz"] = np.array([f.measurement.rotation for f in fs])
                g["pz"] = np.array([f.measurement.translation for f in fs])
            else:
                g["z"] = np.array([f.measurement for f in fs])
            info = np.array([f.information for f in fs])
            g["info"] = info
            # whitening: r_w = W r with W^T W = info
            g["W"] = np.swapaxes(np.linalg.cholesky(info), -1, -2)
            self.groups[kind] = g

    def gather(self, kind, R, p, L):
        g = self.groups[kind]
        a = g["a"]
        va = (R[a], p[a])
        if kind == "Gnss":
            return va, None
        b = g["b"]
        vb = (L[b],) if kind == "SignObservation" else (R[b], p[b])
        return va, vb

    def eval(self, kind, va, vb):
        g = self.groups[kind]
        if kind in ("Odometry", "LoopClosure"):
            return _rel_residual(va[0], va[1], vb[0], vb[1], g["Rz"], g["pz"])
        if kind == "Gnss":
            return va[1] - g["z"]
        return _sign_residual(va[0], va[1], vb[0], g["z"])

    def residuals(self, kind, R, p, L):
        return self.eval(kind, *self.gather(kind, R, p, L))

    def weights(self, kind, r, huber_delta):
        g = self.groups[kind]
        s2 = np.einsum("ni,nij,nj->n", r, g["info"], r)
        if kind != "LoopClosure" or huber_delta is None:
            return s2, np.ones(len(s2))
        e = np.sqrt(s2)
        robust = e > huber_delta
        cost = np.where(robust, 2 * huber_delta * e - huber_delta**2, s2)
        w = np.where(robust, huber_delta / np.maximum(e, 1e-300), 1.0)
        return cost, w

    def cost(self, R, p, L, huber_delta):
        total = 0.0
        for kind in self.groups:
            c, _ = self.weights(kind, self.residuals(kind, R, p, L), huber_delta)
            total += float(c.sum())
        return total

    def retract(self, dx):
        R, p, L = self.R.copy(), self.p.copy(), self.L.copy()
        act = self.pose_off >= 0
        if act.any():
            o = self.pose_off[act]
            p[act] += dx[o[:, None] + np.arange(3)]
            if self.pdim == 6:
                R[act] = R[act] @ so3_exp(dx[o[:, None] + 3 + np.arange(3)])
            else:
                yaw = np.zeros((len(o), 3))
                yaw[:, 2] = dx[o + 3]
                R[act] = so3_exp(yaw) @ R[act]
        act = self.sign_off >= 0
        if act.any():
            o = self.sign_off[act]
            L[act] += dx[o[:, None] + np.arange(3)]
        return R, p, L

    def _perturb(self, v, d, h):
        if len(v) == 1:  # landmark
            L = v[0].copy()
            L[:, d] += h
            return (L,)
        R, p = v
        if d < 3:
            p = p.copy()
            p[:, d] += h
        elif self.pdim == 6:
            e = np.zeros(3)
            e[d - 3] = h
            R = R @ so3_exp(e)
        else:
            R = so3_exp(np.array([0.0, 0.0, h])) @ R
        return (R, p)

    def linearize(self, huber_delta, h):
        rows, cols, vals = [], [], []
        rhs_blocks = []
        row0 = 0
        for kind, g in self.groups.items():
            va, vb = self.gather(kind, self.R, self.p, self.L)
            r = self.eval(kind, va, vb)
            _, w = self.weights(kind, r, huber_delta)
            W = g["W"] * np.sqrt(w)[:, None, None]
            rw = np.einsum("nij,nj->ni", W, r)
            n, m = r.shape
            ends = ["a"] if kind == "Gnss" else ["a", "b"]
            for which in ends:
                is_sign = kind == "SignObservation" and which == "b"
                offs = (self.sign_off if is_sign else self.pose_off)[g[which]]
                dims = 3 if is_sign else self.pdim
                active = offs >= 0
                if not active.any():
                    continue
                if kind == "Gnss":
                    J = np.zeros((n, m, dims))
                    J[:, :, :3] = np.eye(3)
                else:
                    J = np.empty((n, m, dims))
                    for d in range(dims):
                        if which == "a":
                            rp = self.eval(kind, self._perturb(va, d, h), vb)
                            rm = self.eval(kind, self._perturb(va, d, -h), vb)
                        else:
                            rp = self.eval(kind, va, self._perturb(vb, d, h))
                            rm = self.eval(kind, va, self._perturb(vb, d, -h))
                        J[:, :, d] = (rp - rm) / (2 * h)
                Jw = W @ J  # (n, m, dims)
                fr = np.flatnonzero(active)
                rr = row0 + fr[:, None, None] * m + np.arange(m)[None, :, None]
                cc = offs[fr][:, None, None] + np.arange(dims)[None, None, :]
                rows.append(np.broadcast_to(rr, (len(fr), m, dims)).ravel())
                cols.append(np.broadcast_to(cc, (len(fr), m, dims)).ravel())
                vals.append(Jw[fr].ravel())
            rhs_blocks.append(rw.ravel())
            row0 += n * m
        J = coo_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, int),
              np.concatenate(cols) if cols else np.zeros(0, int))),
            shape=(row0, self.nvar),
        ).tocsr()
        r = np.concatenate(rhs_blocks) if rhs_blocks else np.zeros(0)
        return J, r

    def to_state(self, R, p, L) -> GraphState:
        poses = {k: PoseSE3(R[i], p[i]) for i, k in enumerate(self.pose_keys)}
        signs = {k: L[i].copy() for i, k in enumerate(self.sign_keys)}
        return GraphState(poses, signs)


def total_cost(state: GraphState, factors: Sequence[Factor], huber_delta: Optional[float] = 1.0) -> float:
    prob = _Problem(state, factors)
    return prob.cost(prob.R, prob.p, prob.L, huber_delta)


def solve(
    state: GraphState,
    factors: Sequence[Factor],
    config: OptimizerConfig = OptimizerConfig(),
    fixed: Sequence = (),
) -> OptimizationResult:
    """Levenberg-Marquardt on the whitened, Huber-weighted residuals."""
    factors = list(factors)
    if not fixed and not any(f.kind == "Gnss" for f in factors):
        raise GraphStructureError("no GNSS factor and no fixed vertex: the gauge is free")
    prob = _Problem(state, factors, fixed, config.pose_dofs)
    hd = config.huber_delta
    cost = prob.cost(prob.R, prob.p, prob.L, hd)
    initial = cost
    lam = config.initial_lambda
    it = 0
    converged = False
    if prob.nvar == 0 or cost == 0.0:
        return OptimizationResult(prob.to_state(prob.R, prob.p, prob.L), initial, cost, 0, True)
    while it < config.max_iterations:
        it += 1
        J, r = prob.linearize(hd, config.fd_step)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        dH = H.diagonal()
        accepted = False
        while lam <= config.max_lambda:
            A = H + diags(lam * np.maximum(dH, 1e-12)) + 1e-12 * identity(prob.nvar)
            dx = -spsolve(A.tocsc(), g)
            if not np.all(np.isfinite(dx)):
                lam *= 10
                continue
            R, p, L = prob.retract(dx)
            new = prob.cost(R, p, L, hd)
            if new <= cost:
                accepted = True
                break
            lam *= 4
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        prob.R, prob.p, prob.L = R, p, L
        rel = (cost - new) / max(cost, 1e-300)
        cost = new
        lam = max(lam / 3, 1e-12)
        if rel < config.rel_tol or cost == 0.0:
            converged = True
            break
    if not np.isfinite(cost):
        raise OptimizationError(f"cost diverged after {it} iterations (initial {initial:.6g})")
    return OptimizationResult(prob.to_state(prob.R, prob.p, prob.L), initial, cost, it, converged)


def optimize(
    state: GraphState,
    factors: Sequence[Factor],
    config: OptimizerConfig = OptimizerConfig(),
    fixed: Sequence = (),
) -> GraphState:
    return solve(state, factors, config, fixed).state


# ---------------------------------------------------------------------------
# lane registration


def _line_directions(points: np.ndarray, tree: cKDTree, k: int = 5) -> np.ndarray:
    k = min(k, len(points))
    _, nb = tree.query(points, k=k)
    nb = np.asarray(nb).reshape(len(points), k)
    P = points[nb] - points[nb].mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", P, P)
    _, V = np.linalg.eigh(C)
    return V[:, :, -1]


def register_lane_submaps(
    points_a: np.ndarray,
    labels_a: np.ndarray,
    points_b: np.ndarray,
    labels_b: np.ndarray,
    initial_guess: PoseSE3 = PoseSE3.identity(),
    max_iterations: int = 50,
    max_correspondence: float = 6.0,
    min_correspondence: float = 1.0,
    reject_residual: float = 1.0,
    sigma_floor: float = 0.05,
    line_class: int = 0,
):
    """Pose ``T`` with ``T * b ~ a``, by class-gated ICP.

    Points of ``line_class`` are matched point-to-line against the local
    direction of the nearest same-class point in ``a``; other classes are
    matched point-to-point. Returns ``(T, information)``; raises
    :class:`RegistrationRejected` on failure.
    """
    A = np.asarray(points_a, dtype=float)
    B = np.asarray(points_b, dtype=float)
    la, lb = np.asarray(labels_a), np.asarray(labels_b)
    if len(A) < 20 or len(B) < 20:
        raise RegistrationRejected("a submap has fewer than 20 points")
    classes = [c for c in np.unique(lb) if np.any(la == c)]
    if not classes:
        raise RegistrationRejected("no shared class labels")
    trees, dirs, pts = {}, {}, {}
    for c in classes:
        pa = A[la == c]
        trees[c] = cKDTree(pa)
        pts[c] = pa
        dirs[c] = _line_directions(pa, trees[c]) if c == line_class and len(pa) >= 2 else None

    R = initial_guess.rotation.copy()
    t = initial_guess.translation.copy()
    gate = max_correspondence
    converged = False
    rms = np.inf
    for _ in range(max_iterations):
        JtJ = np.zeros((6, 6))
        Jtr = np.zeros(6)
        sq, count = 0.0, 0
        for c in classes:
            q = B[lb == c] @ R.T + t
            d, nn = trees[c].query(q, distance_upper_bound=gate)
            ok = np.isfinite(d)
            if not ok.any():
                continue
            q, nn = q[ok], nn[ok]
            e = q - pts[c][nn]
            if dirs[c] is not None:
                D = dirs[c][nn]
                N = np.eye(3) - np.einsum("ni,nj->nij", D, D)
            else:
                N = np.broadcast_to(np.eye(3), (len(q), 3, 3))
            r = np.einsum("nij,nj->ni", N, e)
            J = np.concatenate([N, -N @ hat(q)], axis=2)  # d r / d(dt, dphi), left perturbation
            JtJ += np.einsum("nki,nkj->ij", J, J)
            Jtr += np.einsum("nki,nk->i", J, r)
            sq += float(np.einsum("ni,ni->", r, r))
            count += len(q)
        if count < 10:
            raise RegistrationRejected(f"only {count} correspondences")
        rms = np.sqrt(sq / count)
        dx = -np.linalg.solve(JtJ + 1e-9 * np.eye(6), Jtr)
        dR = so3_exp(dx[3:])
        R = dR @ R
        t = dR @ t + dx[:3]
        gate = max(min_correspondence, min(gate, 3.0 * rms + 0.5))
        if np.linalg.norm(dx) < 1e-9:
            converged = True
            break
    if not converged:
        raise RegistrationRejected(f"no convergence in {max_iterations} iterations")
    if rms > reject_residual:
        raise RegistrationRejected(f"final residual {rms:.3f} m too large")
    # information of the relative pose in the (rho, phi) convention of the
    # loop-closure residual, evaluated at the solution
    info = JtJ / max(rms * rms, sigma_floor**2)
    w, V = np.linalg.eigh(0.5 * (info + info.T))
    info = (V * np.maximum(w, 1e-6)) @ V.T
    return PoseSE3(R, t), info


# ---------------------------------------------------------------------------
# applying corrections


def pose_corrections(drive: DriveMap, optimized: GraphState):
    """Left corrections ``T_opt T_est^-1`` for every pose of ``drive``."""
    R, p = drive.pose_arrays()
    Ro = np.array([optimized.poses[(drive.drive_id, k)].rotation for k, _ in drive.poses])
    po = np.array([optimized.poses[(drive.drive_id, k)].translation for k, _ in drive.poses])
    dR = Ro @ np.swapaxes(R, -1, -2)
    dt = po - np.einsum("nij,nj->ni", dR, p)
    return dR, dt


def transform_drive_map(drive: DriveMap, optimized: GraphState) -> DriveMap:
    """Move every control point rigidly with the correction of its nearest
    pose; covariances are rotated accordingly. Signs follow the same rule."""
    if not drive.poses:
        return drive
    dR, dt = pose_corrections(drive, optimized)
    _, p = drive.pose_arrays()
    tree = cKDTree(p)

    def move(points, covs):
        _, k = tree.query(points)
        m = np.einsum("nij,nj->ni", dR[k], points) + dt[k]
        P = dR[k] @ covs @ np.swapaxes(dR[k], -1, -2)
        return m, P

    lanes = []
    for traj in drive.lane_lines:
        m, P = move(traj.means, traj.covs)
        lanes.append(BSplineTrajectory(m, P, traj.birth_time))
    signs = []
    for s in drive.signs:
        m, P = move(s.position[None], s.covariance[None])
        signs.append(SignRecord(s.sign_id, m[0], P[0]))
    poses = [(k, optimized.poses[(drive.drive_id, k)]) for k, _ in drive.poses]
    return DriveMap(drive.drive_id, poses, lanes, signs, list(drive.gnss_fixes), drive.lane_ids, drive.detections)
