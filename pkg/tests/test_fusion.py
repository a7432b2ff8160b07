import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefuse.fusion import (
    associate_points,
    detect_overlap,
    fuse_pair,
    grid_search_associate,
    information_update,
    information_update_block,
    information_update_joint,
    make_pseudo_measurements,
    update_trajectory,
)
from lanefuse.spline import BSplineTrajectory, GaussianControlPoint, sample_arrays
from oracles import batch_wls, curve_point, dense_curve, random_spd

seeds = st.integers(0, 2**32 - 1)


def random_instance(rng, n=None):
    means = rng.normal(0, 5, (3, 3))
    covs = np.array([random_spd(rng, rng.uniform(0.1, 2.0)) for _ in range(3)])
    n = int(rng.integers(0, 11)) if n is None else n
    us = rng.uniform(0, 1, n)
    zs = np.array([curve_point(means, 0, u) for u in us]).reshape(n, 3) + rng.normal(0, 1, (n, 3))
    Rs = np.array([random_spd(rng, rng.uniform(0.05, 1.0)) for _ in range(n)]).reshape(n, 3, 3)
    M = int(rng.integers(1, 11))
    return means, covs, zs, Rs, us, M


def blockdiag(covs):
    P = np.zeros((9, 9))
    for k in range(3):
        P[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = covs[k]
    return P


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@given(seeds)
def test_block_update_matches_batch_least_squares(seed):
    means, covs, zs, Rs, us, M = random_instance(np.random.default_rng(seed))
    m, P = information_update_block(means, covs, zs, Rs, us, M)
    mo, Po = batch_wls(means.reshape(9), blockdiag(covs), zs, Rs, us, M)
    assert rel_err(m, mo) < 1e-9
    assert rel_err(P, Po) < 1e-9


@given(seeds)
def test_joint_update_matches_batch_least_squares(seed):
    rng = np.random.default_rng(seed)
    means, _, zs, Rs, us, M = random_instance(rng)
    A = rng.normal(size=(9, 9))
    prior = A @ A.T + 0.5 * np.eye(9)
    m, P = information_update_joint(means.reshape(9), prior, zs, Rs, us, M)
    mo, Po = batch_wls(means.reshape(9), prior, zs, Rs, us, M)
    assert rel_err(m, mo) < 1e-9
    assert rel_err(P, Po) < 1e-9


@given(seeds)
def test_control_point_update_keeps_marginals(seed):
    means, covs, zs, Rs, us, M = random_instance(np.random.default_rng(seed), n=4)
    prior = [GaussianControlPoint(m, P) for m, P in zip(means, covs)]
    pms = [p for p in make_pseudo_from(zs, Rs)]
    out = information_update(prior, list(zip(pms, us)), M)
    mo, Po = batch_wls(means.reshape(9), blockdiag(covs), zs, Rs, us, M)
    for k in range(3):
        np.testing.assert_allclose(out[k].mean, mo[3 * k : 3 * k + 3], rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(out[k].covariance, Po[3 * k : 3 * k + 3, 3 * k : 3 * k + 3], rtol=1e-9, atol=1e-12)


def make_pseudo_from(zs, Rs):
    from lanefuse.fusion import PseudoMeasurement

    return [PseudoMeasurement(z, R, 0, 0.0) for z, R in zip(zs, Rs)]


def test_empty_update_returns_prior():
    prior = [GaussianControlPoint(np.full(3, k), np.eye(3)) for k in range(3)]
    out = information_update(prior, [], 10)
    assert all(a is b for a, b in zip(out, prior))
    with pytest.raises(ValueError):
        information_update(prior[:2], [], 10)


@given(seeds)
def test_measurements_on_curve_leave_mean_fixed(seed):
    rng = np.random.default_rng(seed)
    means, covs, _, _, _, M = random_instance(rng, n=0)
    us = rng.uniform(0, 1, 6)
    zs = np.array([curve_point(means, 0, u) for u in us])
    Rs = np.array([random_spd(rng) for _ in us])
    m, P = information_update_block(means, covs, zs, Rs, us, M)
    np.testing.assert_allclose(m, means.reshape(9), atol=1e-9)
    assert np.trace(P) < np.trace(blockdiag(covs))


@given(seeds)
def test_update_never_increases_trace(seed):
    means, covs, zs, Rs, us, M = random_instance(np.random.default_rng(seed))
    traj = BSplineTrajectory(means, covs)
    _, _, audit = update_trajectory(traj, zs, Rs, np.zeros(len(us), int), us, M)
    for a in audit:
        assert a.fused_trace <= a.prior_trace
        if a.informed:
            assert a.fused_trace < a.prior_trace


def line_traj(n=8, spacing=15.0, offset=(0.0, 0.0, 0.0), cov=0.04):
    means = np.column_stack([np.arange(n) * spacing, np.zeros(n), np.zeros(n)]) + np.asarray(offset)
    return BSplineTrajectory(means, np.broadcast_to(cov * np.eye(3), (n, 3, 3)))


@given(seeds)
def test_grid_search_agrees_with_exhaustive_grid(seed):
    rng = np.random.default_rng(seed)
    means = np.cumsum(rng.normal(0, 1, (6, 3)) + [10.0, 0, 0], axis=0)
    traj = BSplineTrajectory(means)
    pts, _, _ = dense_curve(traj.means, 10)
    k = int(rng.integers(len(pts)))
    a = grid_search_associate(traj, pts[k])
    # a query on a grid point is found exactly
    assert a.distance < 1e-9
    np.testing.assert_allclose(curve_point(traj.means, a.target_segment, a.target_u), pts[k], atol=1e-9)


def test_refined_association_never_worse():
    rng = np.random.default_rng(5)
    traj = BSplineTrajectory(np.cumsum(rng.normal(0, 1, (8, 3)) + [12.0, 0, 0], axis=0))
    q = sample_arrays(traj, 37)[0]
    q = q + rng.normal(0, 0.3, q.shape)
    _, _, dc = associate_points(traj, q, 10, refine=False)
    seg, u, df = associate_points(traj, q, 10, refine=True)
    assert np.all(df <= dc + 1e-12)
    assert np.all((u >= 0) & (u < 1)) and np.all((seg >= 0) & (seg < traj.num_segments))


def test_pseudo_measurements_follow_source():
    src = line_traj(5)
    pms = make_pseudo_measurements(src, 10)
    assert len(pms) == 30
    assert pms[13].source_segment == 1 and abs(pms[13].source_u - 0.3) < 1e-15
    np.testing.assert_allclose(pms[13].position, curve_point(src.means, 1, 0.3))


def test_case3_from_copied_middle_points():
    target = line_traj(10)
    src_means = np.vstack([target.means[5:], target.means[-1] + np.outer(np.arange(1, 5), [15.0, 0, 0])])
    src = BSplineTrajectory(src_means, np.broadcast_to(0.04 * np.eye(3), (len(src_means), 3, 3)))
    rep = detect_overlap(target, src)
    assert rep.case_label == "Case3"
    res = fuse_pair(target, src)
    assert len(res.merged) == 1
    fused = res.merged[0]
    # the joined line starts like the target and ends like the source
    assert np.array_equal(fused.means[:2], target.means[:2])
    assert np.array_equal(fused.means[-2:], src.means[-2:])
    assert 13 <= len(fused) <= 14


def test_island_gap_gives_case5():
    target = line_traj(14)
    m = np.array(target.means)
    m[6:8, 1] += 4.0
    src = BSplineTrajectory(m, target.covs)
    rep = detect_overlap(target, src)
    assert rep.case_label == "Case5"
    assert len(rep.overlap_runs) == 2


def test_far_apart_lines_do_not_overlap():
    rep = detect_overlap(line_traj(), line_traj(offset=(0, 3.5, 0)))
    assert rep.case_label is None
    with pytest.raises(ValueError):
        fuse_pair(line_traj(), line_traj(offset=(0, 3.5, 0)))


def test_end_to_start_overlap_joins_lines():
    target = line_traj(8)
    src = line_traj(8, offset=(-60.0, 0.1, 0.0))
    rep = detect_overlap(target, src)
    assert rep.case_label == "Case2"
    res = fuse_pair(target, src)
    assert len(res.merged) == 1 and not res.truncated
    assert len(res.merged[0]) == 12


def test_reversed_source_is_aligned():
    target = line_traj(8)
    src = line_traj(8, offset=(0.0, 0.1, 0.0)).reversed()
    rep = detect_overlap(target, src)
    assert rep.source_reversed and rep.case_label == "Complete"
    res = fuse_pair(target, src)
    assert len(res.merged) == 1
    # the fused line lies between the two inputs
    y = res.merged[0].means[:, 1]
    assert np.all((y > 0.0) & (y < 0.1))


def test_fusion_is_bayesian_for_unequal_covariances():
    target = line_traj(8, cov=0.01)
    src = line_traj(8, offset=(0.0, 0.3, 0.0), cov=1.0)
    res = fuse_pair(target, src)
    # the confident target barely moves
    assert np.abs(res.merged[0].means[:, 1]).max() < 0.05
