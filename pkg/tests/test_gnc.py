import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from oracles import (
    averaging_problem,
    margin,
    pose_tls_subset_optimum,
    random_averaging_problem,
    tls_subset_optimum,
)
from sgfuse import liegroup as lg
from sgfuse.gnc import (
    GncConfig,
    PoseBetween,
    PosePrior,
    RankDeficientError,
    RobustProblem,
    VectorBetween,
    VectorPrior,
    solve_gnc,
    solve_weighted,
    sqrt_information,
    tls_weights,
)
from sgfuse.liegroup import Pose


def test_config_validation():
    with pytest.raises(ValueError):
        GncConfig(inlier_threshold=0.0)
    with pytest.raises(ValueError):
        GncConfig(mu_update_factor=1.0)
    assert GncConfig().mu_update_factor == 1.4
    assert np.isclose(GncConfig().threshold(6), np.sqrt(chi2.ppf(0.99, 6)))
    assert GncConfig(inlier_threshold=2.5).threshold(3) == 2.5


def test_sqrt_information_factor(rng):
    A = rng.normal(size=(6, 6))
    cov = A @ A.T + np.eye(6)
    L = sqrt_information(cov)
    assert np.allclose(L.T @ L, np.linalg.inv(cov))
    v = rng.normal(size=6)
    assert np.isclose(np.sum((L @ v) ** 2), lg.mahalanobis_sq(v, cov))


def test_problem_rejects_bad_keys():
    with pytest.raises(ValueError):
        RobustProblem([np.zeros(2)], [VectorPrior([1], [[0.0, 0.0]], np.eye(2))])
    with pytest.raises(ValueError):
        RobustProblem([Pose.identity()], [VectorPrior([0], [[0.0] * 6], np.eye(6))])


# solve_weighted -----------------------------------------------------------------------


def test_zero_residuals_unchanged_in_one_iteration():
    p = RobustProblem([np.array([2.0])], [VectorPrior([0, 0], [[2.0], [2.0]], [[1.0]])])
    sol = solve_weighted(p, np.ones(2))
    assert sol.iterations == 1
    assert np.array_equal(sol.values[0], [2.0])


def test_weighted_mean_closed_form(rng):
    x = rng.normal(size=8)
    w = rng.uniform(0.1, 1.0, size=8)
    p = RobustProblem([np.zeros(1)], [VectorPrior(np.zeros(8, int), x[:, None], [[1.0]])])
    sol = solve_weighted(p, w)
    assert np.isclose(sol.values[0][0], np.sum(w * x) / np.sum(w), atol=1e-12)


def test_pose_chain_exact_recovery(rng):
    truth = [Pose.exp(rng.normal(size=6)) for _ in range(3)]
    E = lg.stack([truth[0].inverse() @ truth[1], truth[1].inverse() @ truth[2]])
    init = [truth[0]] + [t.boxplus(0.2 * rng.normal(size=6)) for t in truth[1:]]
    p = RobustProblem(init, [PoseBetween([[0, 1], [1, 2]], E, np.eye(6))], fixed=[0])
    sol = solve_weighted(p, np.ones(2))
    for got, want in zip(sol.values, truth):
        assert got.allclose(want, atol=1e-8)


def test_pose_prior_pulls_to_measurement():
    target = Pose.from_rotvec([0.3, 0.1, -0.4], [1, 2, 3])
    p = RobustProblem([Pose.identity()], [PosePrior([0], target.matrix[None], np.eye(6))])
    assert solve_weighted(p, np.ones(1)).values[0].allclose(target, atol=1e-9)


def test_rank_deficiency_is_signalled():
    p = RobustProblem([np.zeros(2), np.zeros(2)], [VectorPrior([0], [[1.0, 1.0]], np.eye(2))])
    with pytest.raises(RankDeficientError) as exc:
        solve_weighted(p, np.ones(1))
    assert exc.value.variables == [1]
    held = solve_weighted(p, np.ones(1), hold_uninformed=True)
    assert np.allclose(held.values[0], 1.0) and np.allclose(held.values[1], 0.0)


def test_weights_outside_unit_interval_rejected():
    p = averaging_problem([[0.0], [1.0]])
    with pytest.raises(ValueError):
        solve_weighted(p, np.array([1.0, 1.5]))


def test_vector_between_chain():
    p = RobustProblem(
        [np.zeros(2), np.zeros(2), np.zeros(2)],
        [VectorBetween([[0, 1], [1, 2]], [[1.0, 0.0], [0.0, 2.0]], np.eye(2))],
        fixed=[0],
    )
    sol = solve_weighted(p, np.ones(2))
    assert np.allclose(sol.values[2], [1.0, 2.0])


# TLS weights ----------------------------------------------------------------------------


@given(st.floats(1e-4, 1e4), st.lists(st.floats(0.0, 1e6), min_size=1, max_size=20))
def test_tls_weights_in_unit_interval(mu, s):
    w = tls_weights(np.array(s), mu)
    assert np.all((w >= 0) & (w <= 1))


def test_tls_weight_closed_form():
    mu = 0.5
    # inner and outer breakpoints mu/(mu+1) and (mu+1)/mu
    assert tls_weights(np.array([1 / 3 - 1e-12]), mu)[0] == 1.0
    assert tls_weights(np.array([3.0 + 1e-12]), mu)[0] == 0.0
    s = 1.0
    assert np.isclose(tls_weights(np.array([s]), mu)[0], np.sqrt(mu * (mu + 1) / s) - mu)


# solve_gnc ------------------------------------------------------------------------------


def test_identical_measurements():
    res = solve_gnc(averaging_problem(np.full((6, 2), 3.5)))
    assert np.all(res.weights == 1.0)
    assert np.allclose(res.values[0], 3.5)


def test_scalar_outlier_rejected(rng):
    meas = np.r_[rng.uniform(-0.01, 0.01, 9), 50.0][:, None]
    p = RobustProblem([np.zeros(1)], [VectorPrior(np.zeros(10, int), meas, [[100.0]], True)])
    res = solve_gnc(p)
    eps = GncConfig().threshold(1) / 100.0
    _, mask, _ = tls_subset_optimum(meas, eps)
    assert np.array_equal(res.inlier_mask, mask)
    assert res.weights[9] == 0.0
    assert np.isclose(res.values[0][0], meas[:9].mean(), atol=1e-12)


def test_pose_averaging_five_plus_five(rng):
    truth = Pose.from_rotvec([0.2, -0.1, 0.5], [3.0, -1.0, 2.0])
    cov = np.diag([0.01**2] * 3 + [0.05**2] * 3)
    samples = [truth.boxplus(np.r_[rng.normal(0, 0.005, 3), rng.normal(0, 0.02, 3)]) for _ in range(5)]
    samples += [Pose.from_rotvec(rng.uniform(-np.pi, np.pi, 3) / np.sqrt(3), rng.uniform(-20, 20, 3))
                for _ in range(5)]
    order = rng.permutation(10)
    samples = [samples[i] for i in order]
    p = RobustProblem([samples[0]], [PosePrior(np.zeros(10, int), lg.stack(samples), sqrt_information(cov), True)])
    res = solve_gnc(p)
    assert np.array_equal(res.inlier_mask, order < 5)
    assert np.linalg.norm(res.values[0].t - truth.t) < 0.05
    mask, _ = pose_tls_subset_optimum(samples, sqrt_information(cov), GncConfig().threshold(6))
    assert np.array_equal(mask, order < 5)


def test_trusted_weights_stay_one(rng):
    meas = np.r_[rng.normal(0, 0.1, (6, 1)), [[40.0]]]
    p = RobustProblem([np.zeros(1)], [
        VectorPrior(np.zeros(7, int), meas, [[1.0]], True),
        VectorPrior([0], [[0.05]], [[1.0]], False),
    ])
    res = solve_gnc(p)
    assert res.weights[-1] == 1.0
    assert not res.inlier_mask[-1]
    assert res.weights[6] == 0.0


def test_no_inliers_flagged():
    meas = np.array([[0.0], [100.0], [200.0]])
    p = RobustProblem([np.array([100.0])], [VectorPrior(np.zeros(3, int), meas, [[1.0]], True)])
    res = solve_gnc(p)
    assert res.robust_inliers <= 1
    # two symmetric clusters of size one each: either one inlier or none, never an error
    assert res.no_inliers == (res.robust_inliers == 0)


def test_surrogate_non_increasing_per_inner_solve(rng):
    for _ in range(20):
        meas, _ = random_averaging_problem(rng)
        res = solve_gnc(averaging_problem(meas))
        for step in res.history:
            assert step.cost_after <= step.cost_before + 1e-9
            assert 0.0 <= step.weight_min <= step.weight_max <= 1.0


def test_deterministic(rng):
    meas, _ = random_averaging_problem(rng)
    a = solve_gnc(averaging_problem(meas))
    b = solve_gnc(averaging_problem(meas))
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.values[0], b.values[0])


def test_oracle_equivalence_small_sample():
    rng = np.random.default_rng(7)
    agree = n = 0
    while n < 40:
        meas, eps = random_averaging_problem(rng, n_max=9)
        x, mask, _ = tls_subset_optimum(meas, eps)
        if margin(meas, x, mask, eps) <= 3:
            continue
        n += 1
        agree += np.array_equal(solve_gnc(averaging_problem(meas)).inlier_mask, mask)
    assert agree == n


def test_oracle_is_exact_on_tiny_case():
    # two points 1 apart and one far away, eps = 2: the pair is the optimum
    x, mask, cost = tls_subset_optimum(np.array([[0.0], [1.0], [10.0]]), 2.0)
    assert np.allclose(x, [0.5]) and mask.tolist() == [True, True, False]
    assert np.isclose(cost, 0.5 + 4.0)
