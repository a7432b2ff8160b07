"""Generated target/source pairs for every overlap configuration.

Both trajectories place their control points on one lattice along a road
centerline, so shared lattice sites give identical curves. A source leaves
the road by stepping sideways, which keeps the departed part well beyond the
overlap threshold.

Keys follow the figure panels: ``a`` complete, ``b`` contained, ``c``/``d``
start overlaps (joined / truncated), ``e``/``f`` end overlaps (truncated /
joined), ``g`` interior, ``h`` two separate overlaps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lanefuse.spline import BSplineTrajectory

EXPECTED = {
    "a": "Complete",
    "b": "Case1",
    "c": "Case2",
    "d": "Case2",
    "e": "Case3",
    "f": "Case3",
    "g": "Case4",
    "h": "Case5",
}
TRUNCATES = {"a": False, "b": False, "c": False, "d": True, "e": True, "f": False, "g": True, "h": True}


@dataclass
class OverlapCase:
    panel: str
    target: BSplineTrajectory
    source: BSplineTrajectory
    reversed_source: bool

    @property
    def expected(self) -> str:
        return EXPECTED[self.panel]


def _road(rng):
    """Lattice site k -> (position, unit normal) on a straight or circular road."""
    h = rng.uniform(10.0, 20.0)
    radius = rng.choice([np.inf, rng.uniform(300.0, 1500.0) * rng.choice([-1, 1])])
    yaw = rng.uniform(-np.pi, np.pi)
    origin = rng.uniform(-500.0, 500.0, 3)
    origin[2] = rng.uniform(-5, 5)
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def site(k, lateral=0.0):
        x = k * h
        if np.isinf(radius):
            p = np.array([x, lateral, 0.0])
        else:
            a = x / radius
            r = radius - lateral
            p = np.array([r * np.sin(a), radius - r * np.cos(a), 0.0])
        return origin + Rz @ p

    return site


def _traj(site, ks, lateral, rng, jitter):
    pts = np.array([site(k, d) for k, d in zip(ks, lateral)])
    pts = pts + rng.normal(0.0, jitter, pts.shape)
    covs = []
    for _ in ks:
        A = rng.normal(size=(3, 3)) * 0.1
        covs.append(A @ A.T + rng.uniform(0.01, 0.1) * np.eye(3))
    return BSplineTrajectory(pts, np.array(covs), int(rng.integers(0, 100)))


def _departure(n, step, sign):
    # lateral offsets 0, step, 2 step, ... away from the road
    return sign * step * np.arange(1, n + 1)


def make_case(panel: str, rng) -> OverlapCase:
    site = _road(rng)
    vt = int(rng.integers(8, 14))
    t_ks = np.arange(vt)
    jitter = rng.uniform(0.0, 0.03)
    target = _traj(site, t_ks, np.zeros(vt), rng, 0.0)
    side = rng.choice([-1.0, 1.0])
    step = rng.uniform(3.0, 5.0)
    ext = int(rng.integers(3, 6))  # control points beyond the target
    if panel == "a":
        ks = t_ks
        lat = rng.uniform(-0.15, 0.15) * np.ones(vt)
    elif panel == "b":
        s0 = int(rng.integers(1, 3))
        s1 = vt - 1 - int(rng.integers(1, 3))
        ks = np.arange(s0, s1 + 1)
        lat = np.zeros(len(ks))
    elif panel == "c":
        s1 = vt - 1 - int(rng.integers(2, 4))
        ks = np.arange(-ext, s1 + 1)
        lat = np.zeros(len(ks))
    elif panel == "d":
        s1 = vt - 1 - int(rng.integers(3, 5))
        n_on = s1 + 1 + ext
        ks = np.arange(-ext, s1 + 1 + ext)
        lat = np.concatenate([np.zeros(n_on), _departure(ext, step, side)])
    elif panel == "e":
        s0 = int(rng.integers(3, 5))
        ks = np.arange(s0 - ext, vt + ext)
        lat = np.concatenate([_departure(ext, step, side)[::-1], np.zeros(vt + ext - s0)])
    elif panel == "f":
        s0 = int(rng.integers(2, 4))
        ks = np.arange(s0, vt + ext)
        lat = np.zeros(len(ks))
    elif panel == "g":
        s0 = int(rng.integers(2, 4))
        s1 = vt - 1 - int(rng.integers(2, 4))
        ks = np.arange(s0 - ext, s1 + 1 + ext)
        lat = np.concatenate(
            [_departure(ext, step, side)[::-1], np.zeros(s1 - s0 + 1), _departure(ext, step, side)]
        )
    elif panel == "h":
        vt = max(vt, 12)
        t_ks = np.arange(vt)
        target = _traj(site, t_ks, np.zeros(vt), rng, 0.0)
        ks = t_ks
        lat = np.zeros(vt)
        # an island bulge over interior control points
        a = int(rng.integers(4, vt - 6))
        width = int(rng.integers(2, 4))
        lat[a : a + width] = side * rng.uniform(3.0, 5.0)
    else:
        raise ValueError(panel)
    source = _traj(site, ks, lat, rng, jitter)
    rev = bool(rng.random() < 0.5)
    if rev:
        source = source.reversed()
    return OverlapCase(panel, target, source, rev)


def make_corpus(per_panel: int = 8, seed: int = 0) -> list[OverlapCase]:
    rng = np.random.default_rng(seed)
    return [make_case(p, rng) for _ in range(per_panel) for p in EXPECTED]
