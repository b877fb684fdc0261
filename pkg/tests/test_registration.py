import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidarlines.evaluation import pose_error
from lidarlines.geometry import SE3Transform
from lidarlines.registration import (DegenerateGeometryError, MatchedLine,
                                     RegistrationFailedError, RegistrationProblem, SolverConfig,
                                     point_to_line_cost, register_with_outlier_rejection, solve)
from oracles import projection_distance

TARGET = np.array([
    [[0, 0, 0], [4, 0, 0]],
    [[0, 3, 0], [0, 7, 0]],
    [[2, 2, 0], [2, 2, 3]],
    [[-3, 1, 1], [-3, 4, 2]],
], dtype=float)


def make_problem(T_true, lines=TARGET, per_line=12, noise=0.0, seed=0):
    """Source points sampled on ``lines`` and mapped back by the inverse pose."""
    rng = np.random.default_rng(seed)
    inv = T_true.inverse()
    matches = []
    for e0, e1 in lines:
        t = np.linspace(0.05, 0.95, per_line)[:, None]
        pts = e0 + t * (e1 - e0) + rng.normal(scale=noise, size=(per_line, 3))
        matches.append(MatchedLine(inv.apply(pts), e0, e1))
    return RegistrationProblem(matches)


def test_cost_examples():
    I = SE3Transform.identity()
    assert point_to_line_cost(I, [2, 0, 0], [0, 0, 0], [1, 0, 0]) == 0
    assert point_to_line_cost(I, [0, 0, 1], [0, 0, 0], [1, 0, 0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        point_to_line_cost(I, [0, 0, 1], [1, 1, 1], [1, 1, 1])


def test_cost_matches_projection_formula():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, e0, e1 = rng.normal(size=(3, 3)) * 5
        T = SE3Transform.from_yaw(rng.uniform(0, 6), rng.normal(size=3))
        got = point_to_line_cost(T, p, e0, e1)
        assert got == pytest.approx(projection_distance(T.apply(p[None])[0], e0, e1), abs=1e-12)


def test_matched_line_validation():
    with pytest.raises(ValueError):
        MatchedLine(np.zeros((0, 3)), [0, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        MatchedLine(np.zeros((2, 3)), [1, 0, 0], [1, 0, 0])


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(damping=0)
    with pytest.raises(ValueError):
        SolverConfig(yaw_starts=-1)


def test_solve_identity():
    res = solve(make_problem(SE3Transform.identity()))
    err = pose_error(res.transform, SE3Transform.identity())
    assert err.rte < 1e-9 and err.rre < 1e-6
    assert res.cost == pytest.approx(0, abs=1e-18)


def test_solve_recovers_known_pose():
    T = SE3Transform.from_yaw(np.radians(30), (1.0, 2.0, 0.0))
    res = solve(make_problem(T))
    err = pose_error(res.transform, T)
    assert err.rte < 1e-6 and err.rre < 1e-5
    assert res.converged


def test_solve_recovers_general_rotation():
    R = Rotation.from_euler("xyz", [5, -8, 140], degrees=True).as_matrix()
    T = SE3Transform(R, np.array([-6.0, 11.0, 0.5]))
    err = pose_error(solve(make_problem(T)).transform, T)
    assert err.rte < 1e-6 and err.rre < 1e-5


def test_single_line_is_degenerate():
    prob = make_problem(SE3Transform.identity(), lines=TARGET[:1])
    with pytest.raises(DegenerateGeometryError):
        solve(prob)


def test_parallel_lines_are_degenerate():
    lines = np.array([[[0, 0, 0], [1, 0, 0]], [[0, 2, 0], [3, 2, 0]]], float)
    with pytest.raises(DegenerateGeometryError):
        solve(make_problem(SE3Transform.identity(), lines=lines))


def test_accepted_steps_never_increase_cost():
    T = SE3Transform.from_yaw(2.0, (5.0, -3.0, 0.2))
    res = solve(make_problem(T, noise=0.05, seed=2))
    h = np.asarray(res.cost_history)
    assert len(h) >= 2
    assert np.all(np.diff(h) <= 1e-12 * max(1.0, h[0]))


def test_truth_is_stationary():
    T = SE3Transform.from_yaw(0.4, (1.0, 1.0, 1.0))
    prob = make_problem(T)
    prob.initial = T
    res = solve(prob, SolverConfig(yaw_starts=0))
    assert res.cost < 1e-20
    # numerical gradient of the summed squared distances at the truth
    def total(x):
        D = SE3Transform.from_yaw(x[0], (x[1], x[2], 0.0)).compose(T)
        return sum(np.sum(m.distances(D) ** 2) for m in prob.matches)
    h = 1e-6
    g = [(total(np.eye(3)[i] * h) - total(-np.eye(3)[i] * h)) / (2 * h) for i in range(3)]
    assert np.linalg.norm(g) < 1e-10
    assert pose_error(res.transform, T).rte < 1e-12


def test_outlier_rejection_without_outliers():
    T = SE3Transform.from_yaw(1.0, (2.0, 0.0, 0.0))
    prob = make_problem(T)
    res = register_with_outlier_rejection(prob)
    assert res.rounds == 0
    assert res.inliers.tolist() == [0, 1, 2, 3]
    plain = solve(prob)
    assert pose_error(res.transform, plain.transform).rte < 1e-9


def test_one_wrong_match_is_dropped():
    T = SE3Transform.from_yaw(0.5, (3.0, -1.0, 0.0))
    clean = make_problem(T)
    lines = np.vstack([TARGET, [[[10, 10, 0], [10, 14, 0]]]])
    prob = make_problem(T, lines=lines)
    # shift the last target line 5 m away from its source points
    prob.matches[-1] = MatchedLine(prob.matches[-1].source_points, [15, 10, 0], [15, 14, 0])
    res = register_with_outlier_rejection(prob)
    assert 4 not in res.inliers.tolist() and res.rounds >= 1
    ref = register_with_outlier_rejection(clean).transform
    assert pose_error(res.transform, ref).rte < 1e-4


def test_all_wrong_matches_fail():
    # parallel 10 m source lines paired with mutually skewed targets: one
    # rotation can align at most one of them
    t = np.linspace(0, 10, 20)[:, None]
    matches = [MatchedLine(t * [1, 0, 0] + [0, 5 * i, 0], e0, e1)
               for i, (e0, e1) in enumerate(TARGET[:3])]
    with pytest.raises(RegistrationFailedError):
        register_with_outlier_rejection(RegistrationProblem(matches))


def test_dof_mask_holds_fixed_axes():
    T = SE3Transform.from_yaw(0.3, (1.5, 0.0, 0.0))
    prob = make_problem(T)
    res = solve(prob, dof_mask=(0, 0, 1, 1, 0, 0))
    assert res.transform.translation[1] == pytest.approx(0, abs=1e-12)
    assert res.transform.translation[2] == pytest.approx(0, abs=1e-12)
    assert pose_error(res.transform, T).rte < 1e-6


seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_prop_cost_symmetric_and_weight_invariant(seed):
    rng = np.random.default_rng(seed)
    p, e0, e1 = rng.normal(size=(3, 3)) * 4
    T = SE3Transform.from_yaw(rng.uniform(0, 6), rng.normal(size=3))
    a = point_to_line_cost(T, p, e0, e1)
    assert point_to_line_cost(T, p, e1, e0) == pytest.approx(a, rel=1e-12, abs=1e-12)
    # uniformly reweighting every member point leaves the optimum unchanged
    T_true = SE3Transform.from_yaw(rng.uniform(0, 6), (rng.uniform(-5, 5), rng.uniform(-5, 5), 0))
    prob = make_problem(T_true, noise=0.02, seed=seed % 1000)
    heavy = RegistrationProblem([MatchedLine(np.repeat(m.source_points, 2, axis=0), m.e0, m.e1)
                                 for m in prob.matches])
    r1 = solve(prob).transform
    r2 = solve(heavy).transform
    assert pose_error(r1, r2).rte < 1e-6


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_prop_random_pose_recovered(seed):
    rng = np.random.default_rng(seed)
    T = SE3Transform.from_yaw(rng.uniform(-np.pi, np.pi), rng.uniform(-20, 20, size=3) * [1, 1, 0.1])
    err = pose_error(solve(make_problem(T)).transform, T)
    assert err.rte < 1e-6 and err.rre < 1e-5
