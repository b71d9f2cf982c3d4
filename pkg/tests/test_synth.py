import numpy as np
import pytest

from groundcbm.metrics import anec
from groundcbm.sparse_final import compute_lambda_max, objective, solve_elastic_net
from groundcbm.synth import (PlantedModel, brute_force_nec, brute_force_prune,
                             coordinate_descent_oracle, generate, make_planted, random_spd)

from conftest import run_planted_pipeline


def test_generation_is_deterministic():
    P = make_planted(d=16, k=8, C=3, s=3, seed=4)
    a, b = generate(P, 50, seed=9), generate(P, 50, seed=9)
    assert a.embeddings.values.tobytes() == b.embeddings.values.tobytes()
    assert a.crop_embeddings.values.tobytes() == b.crop_embeddings.values.tobytes()
    assert a.detections == b.detections
    np.testing.assert_array_equal(a.class_labels, b.class_labels)
    c = generate(P, 50, seed=10)
    assert a.embeddings.values.tobytes() != c.embeddings.values.tobytes()


def test_noise_free_labels_equal_threshold_test():
    P = make_planted(d=16, k=8, C=3, s=3, noise_rate=0.0, seed=1)
    g = generate(P, 400, seed=2)
    Z = g.embeddings.values.astype(np.float64)
    want = (Z @ P.concept_directions.T > P.concept_thresholds).astype(np.uint8)
    # float32 storage can move a score across its threshold only within rounding
    margin = np.abs(Z @ P.concept_directions.T - P.concept_thresholds)
    safe = margin > 1e-3
    np.testing.assert_array_equal(g.concept_labels[safe], want[safe])
    np.testing.assert_array_equal(g.concept_labels, g.clean_concepts)


def test_noise_rate_flips_at_stated_rate():
    P = make_planted(d=16, k=8, C=3, s=3, noise_rate=0.2, seed=1)
    g = generate(P, 5000, seed=3)
    rate = np.mean(g.concept_labels != g.clean_concepts)
    assert abs(rate - 0.2) < 4 * np.sqrt(0.2 * 0.8 / g.clean_concepts.size)


@pytest.mark.parametrize("k,C,s", [(24, 6, 5), (8, 3, 3), (5, 4, 5), (12, 2, 1)])
def test_supports_have_s_nonzeros(k, C, s):
    P = make_planted(d=max(k, 8), k=k, C=C, s=s, seed=0)
    assert np.all(np.count_nonzero(P.true_final, axis=1) == s)
    assert np.all(P.true_final >= 0)
    assert P.vocabulary().class_candidates == {
        c: np.flatnonzero(P.true_final[c]).tolist() for c in range(C)}


def test_planted_validation():
    P = make_planted(d=8, k=4, C=2, s=2, seed=0)
    with pytest.raises(ValueError):
        PlantedModel(8, 4, 2, 3, P.sigma, P.concept_directions, P.concept_thresholds,
                     P.true_final)
    with pytest.raises(ValueError):
        make_planted(d=8, k=4, C=2, s=2, noise_rate=0.5)
    with pytest.raises(ValueError):
        make_planted(d=4, k=8, C=2, s=2)


def test_every_box_has_a_crop():
    P = make_planted(d=16, k=8, C=3, s=3, seed=5)
    g = generate(P, 100, seed=6)
    assert sum(len(r.boxes) for r in g.detections) == g.crop_embeddings.n
    names = P.concept_names
    crops = g.crop_embeddings.values.astype(np.float64)
    row = 0
    for rec in g.detections:
        for box in rec.boxes:
            j = names.index(box.concept)
            assert crops[row] @ P.concept_directions[j] > P.concept_thresholds[j] - 1e-3
            row += 1


def test_random_spd_is_positive_definite(rng):
    for d in (1, 5, 30):
        S = random_spd(d, rng)
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= 0.1 - 1e-9


def test_cd_oracle_zero_above_lambda_max(rng):
    X = rng.standard_normal((40, 5))
    y = rng.integers(0, 3, 40)
    lm = compute_lambda_max(X, y, 0.9, n_classes=3)
    # the oracle's bias is only converged to tol, so stay a hair above the boundary
    for lam in (lm * (1 + 1e-6), 2 * lm):
        layer = coordinate_descent_oracle(X, y, lam, 0.9, n_classes=3)
        np.testing.assert_array_equal(layer.weights, 0)
    layer = coordinate_descent_oracle(X, y, 0.5 * lm, 0.9, n_classes=3)
    assert np.count_nonzero(layer.weights) > 0


def test_cd_oracle_separable_toy():
    # one informative concept: class 1 iff x0 > 0
    X = np.array([[-2.0, 0.3], [-1.0, -0.2], [1.0, 0.1], [2.0, -0.4]])
    y = np.array([0, 0, 1, 1])
    layer = coordinate_descent_oracle(X, y, 0.05, 1.0)
    assert layer.weights[1, 0] - layer.weights[0, 0] > 0
    np.testing.assert_array_equal(layer.weights[:, 1], 0)
    np.testing.assert_array_equal(layer.predict(X), y)


def test_cd_oracle_agrees_with_solver(rng):
    X = rng.standard_normal((30, 4))
    y = rng.integers(0, 3, 30)
    lam = 0.3 * compute_lambda_max(X, y, 0.99, n_classes=3)
    ref = coordinate_descent_oracle(X, y, lam, 0.99, n_classes=3)
    got = solve_elastic_net(X, y, lam, 0.99, tol=1e-10, n_classes=3)
    a = objective(ref, X, y, lam, 0.99)
    b = objective(got, X, y, lam, 0.99)
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_brute_force_helpers():
    W = np.array([[0.0, 3.0, -1.0], [0.0, 0.0, 0.0]])
    assert brute_force_nec(W) == 1.0  # two nonzeros over two rows
    np.testing.assert_array_equal(brute_force_prune(W, 1), [[0.0, 3.0, 0.0], [0, 0, 0]])


def test_noise_free_annotations_do_not_hurt():
    clean = run_planted_pipeline(noise_rate=0.0, n_test=2000)
    noisy = run_planted_pipeline(noise_rate=0.05, n_test=2000)
    a = anec(clean.path, clean.cb, clean.Z_test, clean.test.class_labels, [5]).anec5
    b = anec(noisy.path, noisy.cb, noisy.Z_test, noisy.test.class_labels, [5]).anec5
    assert a >= b - 0.01


@pytest.mark.xfail(strict=False, reason="class noise caps NEC-5 accuracy near 0.77 on the "
                   "default fixture; lowering it closes the gap to dense models")
def test_noise_free_anec5_level():
    r = run_planted_pipeline(noise_rate=0.0, n_test=2000)
    assert anec(r.path, r.cb, r.Z_test, r.test.class_labels, [5]).anec5 >= 0.9
