import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefuse.io import (
    FORMAT_VERSION,
    FormatError,
    cov_from_upper,
    cov_to_upper,
    dumps,
    loads,
    parse_scenario,
    read_map,
    to_geojson,
    write_geojson,
    write_map,
)
from lanefuse.lie import PoseSE3
from lanefuse.mapfusion import LaneLineSet
from lanefuse.spline import BSplineTrajectory
from generators import maps_equal, random_fused, random_map

seeds = st.integers(0, 2**32 - 1)


@given(seeds)
def test_round_trip_is_bit_exact(seed):
    kind, payload = random_map(np.random.default_rng(seed))
    text = dumps(kind, payload, {"seed": seed})
    k2, back, meta = loads(text)
    assert k2 == kind and meta == {"seed": seed}
    assert maps_equal(kind, payload, back)
    assert dumps(kind, back, {"seed": seed}) == text


def test_upper_triangle_layout():
    P = np.array([[1.0, 2, 3], [2, 4, 5], [3, 5, 6]])
    assert cov_to_upper(P) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    np.testing.assert_array_equal(cov_from_upper(cov_to_upper(P)), P)
    with pytest.raises(FormatError):
        cov_from_upper([1.0, 2.0])


def test_awkward_floats_survive(tmp_path):
    vals = np.array([[0.1, 1 / 3, 5e-324], [1e300, -2.0**-1074, np.nextafter(1.0, 2.0)], [7.0, -0.0, 123456789.123456789]])
    lanes = LaneLineSet([BSplineTrajectory(vals, np.stack([np.eye(3)] * 3))], [0])
    path = write_map(tmp_path / "m.json", "fused", lanes)
    _, back, _ = read_map(path, expect="fused")
    assert back.trajectories[0].means.tobytes() == lanes.trajectories[0].means.tobytes()


def test_version_and_kind_checks(tmp_path):
    lanes = random_fused(np.random.default_rng(0))
    doc = json.loads(dumps("fused", lanes))
    doc["version"] = "2.0"
    with pytest.raises(FormatError, match="version"):
        loads(json.dumps(doc))
    doc["version"] = FORMAT_VERSION.split(".")[0] + ".7"
    assert loads(json.dumps(doc))[0] == "fused"
    with pytest.raises(FormatError, match="expected a drive"):
        loads(dumps("fused", lanes), expect="drive")
    with pytest.raises(FormatError):
        loads("{not json")
    with pytest.raises(FormatError, match="no such file"):
        read_map(tmp_path / "missing.json")


def test_non_finite_values_rejected():
    m = np.zeros((3, 3))
    m[1, 1] = np.nan
    lanes = LaneLineSet([BSplineTrajectory(m)], [0])
    with pytest.raises(FormatError):
        dumps("fused", lanes)


def test_malformed_records():
    doc = json.loads(dumps("fused", random_fused(np.random.default_rng(1))))
    doc["data"]["lane_lines"][0]["control_points"] = doc["data"]["lane_lines"][0]["control_points"][:2]
    with pytest.raises(FormatError):
        loads(json.dumps(doc))
    del doc["data"]["lane_lines"]
    with pytest.raises(FormatError):
        loads(json.dumps(doc))


def test_geojson_features(tmp_path):
    traj = BSplineTrajectory(np.array([[0.0, 0, 0], [10, 0, 0], [20, 1, 0], [30, 3, 0]]), np.stack([0.04 * np.eye(3)] * 4))
    gj = to_geojson(LaneLineSet([traj], [3]), origin=(5.0, 0.0, 0.0))
    assert gj["type"] == "FeatureCollection" and gj["origin"] == [5.0, 0.0, 0.0]
    lines = [f for f in gj["features"] if f["geometry"]["type"] == "LineString"]
    points = [f for f in gj["features"] if f["geometry"]["type"] == "Point"]
    assert len(lines) == 1 and len(points) == 4
    coords = np.array(lines[0]["geometry"]["coordinates"])
    assert len(lines[0]["properties"]["std"]) == len(coords)
    np.testing.assert_allclose(coords[0], [0.0, 0, 0])
    np.testing.assert_allclose(coords[-1], [20.0, 2, 0])
    path = write_geojson(tmp_path / "out.geojson", [traj])
    assert json.loads(path.read_text())["features"]


def test_scenario_file():
    sf = parse_scenario(
        "template: curve\nseed: 4\ndrives: 3\nlength: 500\nnoise: {gnss_sigma: 0.5}\n"
    )
    assert sf.scenario.template == "curve" and sf.scenario.seed == 4 and sf.drives == 3
    assert sf.noise.gnss_sigma == 0.5 and sf.routes is None
    sf = parse_scenario("routes:\n  - {route: main, start: 5}\n  - {route: exit}\n")
    assert sf.drives == 2 and sf.routes[0].start == 5
    with pytest.raises(FormatError, match="unknown"):
        parse_scenario("noise: {gps: 1}\n")
    with pytest.raises(FormatError):
        parse_scenario("- a\n- b\n")


def test_quaternion_read_back_is_kept():
    q = np.array([0.0, 0.0, -np.sqrt(0.5), -np.sqrt(0.5)])
    T = PoseSE3.from_quaternion(q, [1.0, 2.0, 3.0])
    assert np.array_equal(T.quaternion(), q)
