"""Lane-line map building from crowd-sourced drives.

Vehicles track lane markings as quadratic B-splines with Gaussian control
points; the cloud aligns drives with a pose graph and fuses overlapping
lane lines in information form.
"""
from .fusion import FusionParams, detect_overlap, fuse_pair
from .lie import PoseSE3
from .mapfusion import LaneLineSet, MapFusionParams, greedy_fuse
from .maps import DriveMap, GroundTruthMap
from .spline import BSplineTrajectory, interpolate

__all__ = [
    "BSplineTrajectory",
    "DriveMap",
    "FusionParams",
    "GroundTruthMap",
    "LaneLineSet",
    "MapFusionParams",
    "PoseSE3",
    "detect_overlap",
    "fuse_pair",
    "greedy_fuse",
    "interpolate",
]

__version__ = "0.1.0"
