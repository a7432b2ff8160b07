"""Map exchange files, GeoJSON export and scenario files.

Exchange files are JSON. Floats are written with Python's shortest
round-trip repr, so reading a file back reproduces every value bit for bit.
Covariances travel as upper triangles ``(xx, xy, xz, yy, yz, zz)`` and
poses as an ``(x, y, z, w)`` quaternion plus translation.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .lie import PoseSE3
from .mapfusion import LaneLineSet
from .maps import DriveMap, GnssFix, GroundTruthMap, SignRecord
from .sim import DriveSpec, NoiseConfig, ScenarioSpec, SensorConfig
from .spline import BSplineTrajectory, sample_arrays

FORMAT_VERSION = "1.0"
KINDS = ("drive", "ground_truth", "fused")
_IU = np.triu_indices(3)


class FormatError(ValueError):
    """Malformed, unreadable or incompatible input file."""


# ---------------------------------------------------------------------------
# primitives


def cov_to_upper(P) -> list:
    return np.asarray(P, dtype=float)[_IU].tolist()


def cov_from_upper(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (6,):
        raise FormatError(f"covariance needs 6 values, got {v.shape}")
    P = np.empty((3, 3))
    P[_IU] = v
    P[(_IU[1], _IU[0])] = v
    return P


def _vec(v, n: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (n,):
        raise FormatError(f"{what} needs {n} values, got {a.shape}")
    return a


def trajectory_to_dict(traj: BSplineTrajectory) -> dict:
    return {
        "birth_time": traj.birth_time,
        "control_points": [
            {"mean": m.tolist(), "cov": cov_to_upper(P)} for m, P in zip(traj.means, traj.covs)
        ],
    }


def trajectory_from_dict(d: dict) -> BSplineTrajectory:
    cps = d["control_points"]
    if len(cps) < 3:
        raise FormatError("a lane line needs at least 3 control points")
    means = np.array([_vec(c["mean"], 3, "control point mean") for c in cps])
    covs = np.array([cov_from_upper(c["cov"]) for c in cps])
    return BSplineTrajectory(means, covs, int(d.get("birth_time", 0)))


def pose_to_dict(k: int, T: PoseSE3) -> dict:
    return {"k": int(k), "q": T.quaternion().tolist(), "t": T.translation.tolist()}


def pose_from_dict(d: dict):
    q = _vec(d["q"], 4, "quaternion")
    if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-6):
        raise FormatError("pose quaternion is not unit length")
    return int(d["k"]), PoseSE3.from_quaternion(q, _vec(d["t"], 3, "translation"))


def sign_to_dict(s: SignRecord) -> dict:
    return {"id": int(s.sign_id), "position": np.asarray(s.position, float).tolist(), "cov": cov_to_upper(s.covariance)}


def sign_from_dict(d: dict) -> SignRecord:
    return SignRecord(int(d["id"]), _vec(d["position"], 3, "sign position"), cov_from_upper(d["cov"]))


# ---------------------------------------------------------------------------
# payloads


def drive_to_dict(dm: DriveMap) -> dict:
    out = {
        "drive_id": int(dm.drive_id),
        "poses": [pose_to_dict(k, T) for k, T in dm.poses],
        "lane_lines": [trajectory_to_dict(t) for t in dm.lane_lines],
        "signs": [sign_to_dict(s) for s in dm.signs],
        "gnss": [
            {"k": int(f.time_step), "position": np.asarray(f.position, float).tolist(), "good": bool(f.good)}
            for f in dm.gnss_fixes
        ],
    }
    if dm.lane_ids is not None:
        out["lane_ids"] = [int(i) for i in dm.lane_ids]
    if dm.detections is not None:
        out["detections"] = [np.asarray(r, dtype=float).tolist() for r in dm.detections]
    return out


def drive_from_dict(d: dict) -> DriveMap:
    dets = d.get("detections")
    if dets is not None:
        dets = [np.asarray(r, dtype=float).reshape(-1, 10) for r in dets]
    try:
        return DriveMap(
            int(d["drive_id"]),
            [pose_from_dict(p) for p in d["poses"]],
            [trajectory_from_dict(t) for t in d["lane_lines"]],
            [sign_from_dict(s) for s in d.get("signs", [])],
            [GnssFix(int(g["k"]), _vec(g["position"], 3, "gnss position"), bool(g.get("good", True))) for g in d.get("gnss", [])],
            d.get("lane_ids"),
            dets,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"drive record is incomplete: {exc}") from exc


def ground_truth_to_dict(gt: GroundTruthMap) -> dict:
    return {
        "lane_lines": [np.asarray(p, float).tolist() for p in gt.lane_lines],
        "signs": [np.asarray(s, float).tolist() for s in gt.signs],
        "topology_tags": list(gt.topology_tags),
    }


def ground_truth_from_dict(d: dict) -> GroundTruthMap:
    lines = [np.asarray(p, dtype=float).reshape(-1, 3) for p in d["lane_lines"]]
    signs = [_vec(s, 3, "sign") for s in d.get("signs", [])]
    return GroundTruthMap(lines, signs, d["topology_tags"])


def lanes_to_dict(lanes: LaneLineSet) -> dict:
    return {
        "lane_lines": [trajectory_to_dict(t) for t in lanes.trajectories],
        "drive_ids": [int(i) for i in lanes.drive_ids],
    }


def lanes_from_dict(d: dict) -> LaneLineSet:
    trajs = [trajectory_from_dict(t) for t in d["lane_lines"]]
    return LaneLineSet(trajs, [int(i) for i in d.get("drive_ids", [0] * len(trajs))])


_ENCODE = {"drive": drive_to_dict, "ground_truth": ground_truth_to_dict, "fused": lanes_to_dict}
_DECODE = {"drive": drive_from_dict, "ground_truth": ground_truth_from_dict, "fused": lanes_from_dict}


# ---------------------------------------------------------------------------
# text layout


def _is_flat(v) -> bool:
    return isinstance(v, list) and all(not isinstance(x, (list, dict)) for x in v)


def _check_finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        raise FormatError("non-finite value cannot be written")


def _dump(obj, indent: int, out: list) -> None:
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}  {json.dumps(str(k))}: ")
            _dump(v, indent + 2, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, list) and not _is_flat(obj):
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad + "  ")
            _dump(v, indent + 2, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "]")
    else:
        for x in obj if isinstance(obj, list) else [obj]:
            _check_finite(x)
        out.append(json.dumps(obj, allow_nan=False, separators=(", ", ": ")))


def _plain(v):
    """Metadata values as plain JSON types."""
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def dumps(kind: str, payload, metadata: Optional[dict] = None) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    doc = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "metadata": _plain(metadata or {}),
        "data": _ENCODE[kind](payload),
    }
    out: list = []
    _dump(doc, 0, out)
    return "".join(out) + "\n"


def loads(text: str, expect: Optional[str] = None):
    """Parse an exchange file. Returns ``(kind, payload, metadata)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"not a map exchange file: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc or "kind" not in doc:
        raise FormatError("missing version or kind")
    if str(doc["version"]).split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise FormatError(f"schema version {doc['version']} is not compatible with {FORMAT_VERSION}")
    kind = doc["kind"]
    if kind not in KINDS:
        raise FormatError(f"unknown kind {kind!r}")
    if expect is not None and kind != expect:
        raise FormatError(f"expected a {expect} file, got {kind}")
    try:
        payload = _DECODE[kind](doc["data"])
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed {kind} record: {exc}") from exc
    return kind, payload, doc.get("metadata", {})


def write_map(path, kind: str, payload, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(kind, payload, metadata))
    return path


def read_map(path, expect: Optional[str] = None):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    return loads(path.read_text(), expect)


# ---------------------------------------------------------------------------
# GeoJSON


def to_geojson(lanes, signs=(), origin=(0.0, 0.0, 0.0), samples_per_segment: int = 10) -> dict:
    """Lane lines as LineStrings with per-vertex standard deviations, control
    points and signs as Points. Coordinates are metric and relative to
    ``origin``."""
    if isinstance(lanes, LaneLineSet):
        trajs, drives = lanes.trajectories, lanes.drive_ids
    else:
        trajs = list(lanes)
        drives = [None] * len(trajs)
    o = np.asarray(origin, dtype=float)
    feats = []
    for i, (t, d) in enumerate(zip(trajs, drives)):
        pts, _, _, covs = sample_arrays(t, samples_per_segment, with_cov=True)
        end = t.means[-2] * 0.5 + t.means[-1] * 0.5
        end_cov = 0.25 * (t.covs[-2] + t.covs[-1])
        pts = np.vstack([pts, end])
        sd = np.sqrt(np.concatenate([np.diagonal(covs, axis1=1, axis2=2), [np.diag(end_cov)]]))
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": (pts - o).tolist()},
            "properties": {"lane": i, "drive": d, "std": sd.tolist()},
        })
        for j, (m, P) in enumerate(zip(t.means, t.covs)):
            feats.append({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": (m - o).tolist()},
                "properties": {"lane": i, "control_point": j, "std": np.sqrt(np.diag(P)).tolist()},
            })
    for s in signs:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": (np.asarray(s.position) - o).tolist()},
            "properties": {"sign": int(s.sign_id), "std": np.sqrt(np.diag(s.covariance)).tolist()},
        })
    return {
        "type": "FeatureCollection",
        "frame": "local-metric",
        "origin": o.tolist(),
        "features": feats,
    }


def write_geojson(path, lanes, signs=(), origin=(0.0, 0.0, 0.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_geojson(lanes, signs, origin), allow_nan=False) + "\n")
    return path


# ---------------------------------------------------------------------------
# scenario files


@dataclass(frozen=True)
class ScenarioFile:
    scenario: ScenarioSpec
    noise: NoiseConfig
    sensor: SensorConfig
    drives: int = 8
    seed: int = 0
    routes: Optional[tuple] = None  # explicit DriveSpecs, else the default pattern


def _build(cls, block, what: str):
    block = block or {}
    if not isinstance(block, dict):
        raise FormatError(f"{what} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise FormatError(f"unknown {what} keys: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in block.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise FormatError(f"bad {what}: {exc}") from exc


def parse_scenario(text: str) -> ScenarioFile:
    """Scenario spec from YAML::

        template: split_merge
        seed: 7
        drives: 8
        length: 600
        noise: {gnss_sigma: 1.0}
        sensor: {scan_spacing: 2.5}
        routes:
          - {route: main, start: 5, end_trim: 10}
    """
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"scenario file is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("scenario file must be a mapping")
    doc = dict(doc)
    noise = _build(NoiseConfig, doc.pop("noise", None), "noise")
    sensor = _build(SensorConfig, doc.pop("sensor", None), "sensor")
    drives = int(doc.pop("drives", 8))
    seed = int(doc.pop("seed", 0))
    routes = doc.pop("routes", None)
    if routes is not None:
        routes = tuple(_build(DriveSpec, r, "route") for r in routes)
        drives = len(routes)
    spec = _build(ScenarioSpec, dict(doc, seed=seed), "scenario")
    return ScenarioFile(spec, noise, sensor, drives, seed, routes)


def load_scenario(path) -> ScenarioFile:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    return parse_scenario(path.read_text())
