import dataclasses

import numpy as np
import pytest

from lanefuse.metrics import absolute_error
from lanefuse.sim import (
    DriveSpec,
    NoiseConfig,
    ScenarioError,
    ScenarioSpec,
    SimulationError,
    build_scenario,
    default_drive_specs,
    simulate_drive,
    simulate_drives,
)

SHORT = ScenarioSpec(template="straight", length=300.0)


def test_templates_build():
    for name in ("straight", "curve", "split_merge", "traffic_island", "composite"):
        sc = build_scenario(ScenarioSpec(template=name))
        assert len(sc.gt.lane_lines) == len(sc.gt.topology_tags) >= 3
        assert "main" in sc.routes
    sm = build_scenario(ScenarioSpec(template="split_merge"))
    assert sm.gt.topology_tags.count("split-branch") == 1
    assert {"exit", "entry"} <= set(sm.routes)
    with pytest.raises(ScenarioError):
        build_scenario(ScenarioSpec(template="roundabout"))


def test_simulation_is_deterministic():
    sc = build_scenario(SHORT)
    a = simulate_drive(sc, DriveSpec(), seed=3, drive_id=1)
    b = simulate_drive(sc, DriveSpec(), seed=3, drive_id=1)
    c = simulate_drive(sc, DriveSpec(), seed=4, drive_id=1)
    assert len(a.lane_lines) == len(b.lane_lines)
    for x, y in zip(a.lane_lines, b.lane_lines):
        assert np.array_equal(x.means, y.means) and np.array_equal(x.covs, y.covs)
    assert not np.array_equal(a.lane_lines[0].means, c.lane_lines[0].means)


def test_zero_rate_gives_no_lanes():
    sc = build_scenario(SHORT)
    dm = simulate_drive(sc, DriveSpec(), 0, noise=NoiseConfig(poisson_rate=0.0))
    assert dm.lane_lines == []
    assert dm.poses and dm.signs


def test_detection_noise_statistics():
    sc = build_scenario(SHORT)
    sigma = 0.2
    noise = NoiseConfig(drift=False, detection_sigma=sigma)
    dm = simulate_drive(sc, DriveSpec(), 0, noise=noise, keep_detections=True)
    rows = np.vstack(dm.detections)
    line_y = np.array([p[0, 1] for p in sc.gt.lane_lines])
    y = rows[:, 2]
    dy = y - line_y[np.argmin(np.abs(y[:, None] - line_y[None, :]), axis=1)]
    assert len(rows) > 1000
    assert abs(np.std(rows[:, 3]) / sigma - 1) < 0.1
    assert abs(np.std(dy) / sigma - 1) < 0.1
    assert np.all(rows[:, 4:7] == sigma)


def test_perfect_positioning_gives_accurate_lanes():
    sc = build_scenario(SHORT)
    dm = simulate_drive(sc, DriveSpec(), 0, noise=NoiseConfig(drift=False))
    assert len(dm.lane_lines) == 3
    mean, _ = absolute_error(dm.lane_lines, sc.gt)
    assert mean < 0.1


def test_drift_gives_meter_level_errors():
    sc = build_scenario(dataclasses.replace(SHORT, length=600.0))
    errs = [absolute_error(d.lane_lines, sc.gt)[0] for d in simulate_drives(sc, [DriveSpec()] * 4, 1)]
    assert 0.2 < np.mean(errs) < 3.0


def test_uploads_are_subsampled():
    sc = build_scenario(SHORT)
    dm = simulate_drive(sc, DriveSpec(), 0)
    steps = dm.time_steps
    assert np.all(np.diff(steps) == 4)
    assert [f.time_step for f in dm.gnss_fixes] == list(steps)
    gaps = np.linalg.norm(np.diff(dm.pose_arrays()[1], axis=0), axis=1)
    assert np.all(np.abs(gaps - 10.0) < 1.0)


def test_route_errors():
    sc = build_scenario(SHORT)
    with pytest.raises(SimulationError):
        simulate_drive(sc, DriveSpec(route="exit"), 0)
    with pytest.raises(SimulationError):
        simulate_drive(sc, DriveSpec(start=200.0, end_trim=200.0), 0)


def test_default_routes_alternate():
    specs = default_drive_specs(8, 0, "split_merge")
    assert [s.route for s in specs[:4]] == ["main", "exit", "main", "entry"]
    assert all(0 <= s.start <= 40 and 0 <= s.end_trim <= 40 for s in specs)
    assert specs == default_drive_specs(8, 0, "split_merge")
