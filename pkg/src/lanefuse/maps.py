"""Containers shared by the simulator, the optimizer and the file layer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lie import PoseSE3

TOPOLOGY_TAGS = ("plain", "split-branch", "merge-branch", "island-side")


@dataclass(eq=False)
class GroundTruthMap:
    lane_lines: list  # dense (n, 3) polylines
    signs: list  # 3-vectors, index is the sign id
    topology_tags: list

    def __post_init__(self):
        self.lane_lines = [np.asarray(p, dtype=float) for p in self.lane_lines]
        self.signs = [np.asarray(s, dtype=float) for s in self.signs]
        self.topology_tags = list(self.topology_tags)
        if len(self.topology_tags) != len(self.lane_lines):
            raise ValueError("one topology tag per lane line")
        for t in self.topology_tags:
            if t not in TOPOLOGY_TAGS:
                raise ValueError(f"unknown topology tag {t!r}")


@dataclass(frozen=True, eq=False)
class SignRecord:
    sign_id: int
    position: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True, eq=False)
class GnssFix:
    time_step: int
    position: np.ndarray
    good: bool = True


@dataclass(eq=False)
class DriveMap:
    drive_id: int
    poses: list  # (time step, PoseSE3), strictly increasing steps
    lane_lines: list  # BSplineTrajectory
    signs: list = field(default_factory=list)  # SignRecord
    gnss_fixes: list = field(default_factory=list)  # GnssFix
    lane_ids: Optional[list] = None  # ground-truth line per spline, when known
    detections: Optional[list] = None  # per lane: (n, 10) rows of k, xyz, sigma xyz, heading

    def __post_init__(self):
        steps = [k for k, _ in self.poses]
        if any(b <= a for a, b in zip(steps[:-1], steps[1:])):
            raise ValueError("pose time steps must be strictly increasing")

    @property
    def time_steps(self) -> np.ndarray:
        return np.array([k for k, _ in self.poses], dtype=int)

    def pose_arrays(self):
        R = np.array([T.rotation for _, T in self.poses]).reshape(-1, 3, 3)
        p = np.array([T.translation for _, T in self.poses]).reshape(-1, 3)
        return R, p

    def with_lane_lines(self, lane_lines) -> "DriveMap":
        return DriveMap(
            self.drive_id, list(self.poses), list(lane_lines), list(self.signs),
            list(self.gnss_fixes), self.lane_ids, self.detections,
        )


def pose_list(R: np.ndarray, p: np.ndarray, steps) -> list:
    return [(int(k), PoseSE3(R[i], p[i])) for i, k in enumerate(steps)]

