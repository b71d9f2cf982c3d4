import numpy as np
import pytest

from groundcbm.leakage import (LeakageSetup, check_bounds, check_multiclass,
                               multiclass_bound, optimal_approximator, random_cbl,
                               random_cbl_baseline, run_leakage_experiment,
                               run_multiclass_experiment, theorem_bound)
from groundcbm.metrics import anec
from groundcbm.synth import mc_error_oracle, random_spd


@pytest.fixture
def setup16():
    return LeakageSetup.random(d=16, seed=3, k_grid=(0, 2, 6, 12, 15, 16, 20), trials=200)


def test_setup_validation():
    with pytest.raises(ValueError):
        LeakageSetup(d=2, sigma=np.array([[1.0, 0.5], [0.0, 1.0]]), w=np.ones(2))
    with pytest.raises(ValueError):
        LeakageSetup(d=2, sigma=np.diag([1.0, -1.0]), w=np.ones(2))
    s = LeakageSetup(d=2, sigma=np.diag([3.0, 1.0]), w=np.ones(2))
    assert s.lambda_max == 3.0
    np.testing.assert_array_equal(s.mu, 0)


def test_exact_recovery_when_k_at_least_d(rng):
    d = 10
    sigma = random_spd(d, rng)
    w = rng.standard_normal(d)
    for k in (d, d + 5):
        W_c = rng.standard_normal((k, d))
        w_t, _, err = optimal_approximator(W_c, sigma, None, w)
        assert err <= 1e-10 * (w @ sigma @ w)
        probes = rng.standard_normal((50, d))
        np.testing.assert_allclose(probes @ W_c.T @ w_t, probes @ w, rtol=1e-8, atol=1e-8)


def test_empty_cbl_gives_variance_of_f(rng):
    d = 6
    sigma = random_spd(d, rng)
    w = rng.standard_normal(d)
    mu = rng.standard_normal(d)
    w_t, b_t, err = optimal_approximator(np.zeros((0, d)), sigma, mu, w, b=1.5)
    assert w_t.shape == (0,)
    assert err == pytest.approx(w @ sigma @ w, rel=1e-12)
    assert b_t == pytest.approx(w @ mu + 1.5, rel=1e-12)


def test_matches_pseudoinverse_formula(rng):
    d, k = 8, 3
    sigma = random_spd(d, rng)
    w = rng.standard_normal(d)
    W_c = rng.standard_normal((k, d))
    w_t, _, err = optimal_approximator(W_c, sigma, None, w)
    ref = np.linalg.pinv(W_c @ sigma @ W_c.T) @ W_c @ sigma @ w
    np.testing.assert_allclose(w_t, ref, rtol=1e-9)
    r = w - W_c.T @ ref
    assert err == pytest.approx(r @ sigma @ r, rel=1e-9)


def test_rank_deficient_cbl_does_not_crash(rng):
    d = 6
    sigma = random_spd(d, rng)
    row = rng.standard_normal(d)
    W_c = np.vstack([row, 2 * row, -row])
    w_t, _, err = optimal_approximator(W_c, sigma, None, rng.standard_normal(d))
    assert np.all(np.isfinite(w_t)) and err >= 0


def test_monte_carlo_oracle_agrees(rng):
    d, k = 8, 3
    sigma = random_spd(d, rng)
    mu = rng.standard_normal(d)
    w, b = rng.standard_normal(d), 0.7
    W_c = rng.standard_normal((k, d))
    w_t, b_t, err = optimal_approximator(W_c, sigma, mu, w, b)
    est, se = mc_error_oracle(W_c, sigma, mu, w, b, w_t, b_t, samples=10 ** 6, seed=1)
    assert abs(est - err) <= 3 * se
    # an arbitrary head: analytic error includes the bias mismatch
    w_r, b_r = rng.standard_normal(k), -0.3
    r = w - W_c.T @ w_r
    analytic = r @ sigma @ r + (r @ mu + b - b_r) ** 2
    est, se = mc_error_oracle(W_c, sigma, mu, w, b, w_r, b_r, samples=10 ** 6, seed=2)
    assert abs(est - analytic) <= 3 * se


def test_monte_carlo_trivial_cases(rng):
    d = 5
    sigma = random_spd(d, rng)
    mu, w, b = rng.standard_normal(d), rng.standard_normal(d), 0.4
    est, se = mc_error_oracle(np.eye(d), sigma, mu, w, b, w, b, samples=10 ** 4)
    assert est <= 3 * se + 1e-20
    est, se = mc_error_oracle(np.zeros((1, d)), sigma, mu, w, b, [0.0], b + w @ mu,
                              samples=10 ** 6)
    assert abs(est - w @ sigma @ w) <= 3 * se
    with pytest.raises(ValueError):
        mc_error_oracle(np.eye(d), sigma, mu, w, b, w, b, samples=100)


def test_error_nonincreasing_in_nested_rows(rng):
    d = 12
    sigma = random_spd(d, rng)
    w = rng.standard_normal(d)
    W_full = rng.standard_normal((d, d))
    errs = [optimal_approximator(W_full[:k], sigma, None, w)[2] for k in range(d + 1)]
    assert all(e >= 0 for e in errs)
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(errs, errs[1:]))


def test_theorem_bound_values():
    w = np.array([3.0, 4.0])
    assert theorem_bound(64, 64, 2.0, w) == 0.0
    assert theorem_bound(80, 64, 2.0, w) == 0.0
    assert theorem_bound(0, 64, 2.0, w) == 50.0
    assert theorem_bound(32, 64, 2.0, w) == 25.0
    with pytest.raises(ValueError):
        theorem_bound(-1, 4, 1.0, w)


def test_multiclass_bound_values(rng):
    w = rng.standard_normal(10)
    assert multiclass_bound(3, 10, 2.0, [w]) == theorem_bound(3, 10, 2.0, w)
    assert multiclass_bound(3, 10, 2.0, [w] * 4) == pytest.approx(4 * theorem_bound(3, 10, 2.0, w))


def test_experiment_checks_and_determinism(setup16):
    res = run_leakage_experiment(setup16)
    flags = check_bounds(res, 16)
    assert flags["bound_k_lt_d"] and flags["exact_k_ge_d"]
    again = run_leakage_experiment(setup16)
    for k in setup16.k_grid:
        assert res.per_k[k].errors.tobytes() == again.per_k[k].errors.tobytes()
    assert res.per_k[0].mean_error == pytest.approx(setup16.w @ setup16.sigma @ setup16.w)


def test_sigma_scaling(setup16):
    base = run_leakage_experiment(setup16)
    scaled = run_leakage_experiment(LeakageSetup(
        d=16, sigma=4.0 * setup16.sigma, w=setup16.w, k_grid=setup16.k_grid,
        trials=setup16.trials, seed=setup16.seed))
    for k in (2, 6, 12):
        assert scaled.per_k[k].bound == pytest.approx(4.0 * base.per_k[k].bound, rel=1e-12)
        # identical W_c draws, so the scaling is exact up to rounding
        assert scaled.per_k[k].mean_error == pytest.approx(4.0 * base.per_k[k].mean_error,
                                                           rel=1e-9)


def test_multiclass_experiment(setup16, rng):
    rows = rng.standard_normal((3, 16))
    per_k = run_multiclass_experiment(setup16, rows)
    assert check_multiclass(per_k, 16, setup16.lambda_max, rows)
    for k, (err, bound) in per_k.items():
        assert bound == pytest.approx(multiclass_bound(k, 16, setup16.lambda_max, rows))


def test_random_cbl_is_bias_free_gaussian():
    cb = random_cbl(64, 512, seed=0)
    assert cb.bias is None and cb.weights.shape == (512, 64)
    assert abs(cb.weights.std() - 1) < 0.01
    with pytest.raises(ValueError):
        random_cbl(4, 0, seed=0)


def test_random_baseline_accepts_width_512(rng):
    Z = rng.standard_normal((120, 32))
    y = rng.integers(0, 3, 120)
    cb, path = random_cbl_baseline(Z, y, k=512, seed=0, num_points=3)
    assert cb.k == 512 and path.entries[0].nec == 0


def test_random_vs_trained_gap(planted_run):
    r = planted_run
    cb, path = random_cbl_baseline(r.dataset.features(), r.dataset.class_labels, k=64, seed=0)
    rand = anec(path, cb, r.Z_test, r.test.class_labels, [5, 30])
    trained = anec(r.path, r.cb, r.Z_test, r.test.class_labels, [5, 30])
    assert trained.per_nec[5] - rand.per_nec[5] >= 0.10
    assert abs(trained.per_nec[30] - rand.per_nec[30]) <= 0.05
