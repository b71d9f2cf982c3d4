"""How well a linear head on a random (untrained) concept layer can mimic an
arbitrary linear classifier on the embedding.

For ``f(z) = w^T z + b`` and concept logits ``W_c z``, the best head
``w_tilde^T W_c z + b_tilde`` has expected squared error
``r^T Sigma r`` with ``r = w - W_c^T w_tilde`` minimised by generalised least
squares; ``b_tilde`` absorbs the mean.  Averaged over Gaussian ``W_c`` this
error is bounded by ``lambda_max(Sigma) * (1 - k/d) * ||w||^2`` for ``k < d``
and is zero for ``k >= d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cbl import ConceptBottleneck, fit_normalization, predict_concepts
from .sparse_final import RegularizationPath, solve_path

PINV_RCOND = 1e-12
DEFAULT_K_GRID = (1, 8, 16, 32, 48, 63, 64, 80)


@dataclass(eq=False)
class LeakageSetup:
    d: int
    sigma: np.ndarray
    w: np.ndarray
    b: float = 0.0
    mu: Optional[np.ndarray] = None
    k_grid: Sequence[int] = DEFAULT_K_GRID
    trials: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != (self.d, self.d):
            raise ValueError(f"sigma must be {self.d} x {self.d}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-12 * np.abs(self.sigma).max()):
            raise ValueError("sigma must be symmetric")
        if np.linalg.eigvalsh(self.sigma).min() <= 0:
            raise ValueError("sigma must be positive definite")
        if self.mu is None:
            self.mu = np.zeros(self.d)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.sigma)[-1])

    @classmethod
    def random(cls, d: int = 64, seed: int = 0, **kwargs) -> "LeakageSetup":
        """Random SPD ``Sigma = A^T A + 0.1 I`` and Gaussian ``w``."""
        rng = np.random.default_rng([seed, 0x51])
        A = rng.standard_normal((d, d))
        sigma = A.T @ A + 0.1 * np.eye(d)
        sigma = 0.5 * (sigma + sigma.T)
        w = rng.standard_normal(d)
        return cls(d=d, sigma=sigma, w=w, seed=seed, **kwargs)


@dataclass
class KResult:
    k: int
    mean_error: float
    std_error: float
    bound: float
    errors: np.ndarray = field(repr=False)


@dataclass
class LeakageResult:
    per_k: dict[int, KResult]
    lambda_max: float
    w_norm_sq: float
    exact_recovery_max_error: float

    def rows(self):
        return [(r.k, r.mean_error, r.std_error, r.bound) for r in self.per_k.values()]


def optimal_approximator(W_c, sigma, mu, w, b: float = 0.0, sigma_factor=None):
    """Best linear head on ``W_c z`` for ``f(z) = w^T z + b``.

    Solves ``min ||F^T (W_c^T w_tilde - w)||`` where ``F F^T = Sigma`` (a
    Cholesky factor), which is the whitened form of the normal equations
    ``(W_c Sigma W_c^T) w_tilde = W_c Sigma w``.  Rank deficiency is handled
    by the pseudoinverse with relative cutoff ``1e-12``.

    Returns
    -------
    w_tilde : (k,) array
    b_tilde : float
    error : float
        ``r^T Sigma r`` with ``r = w - W_c^T w_tilde`` (analytic, no sampling).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    W_c = np.asarray(W_c, dtype=np.float64).reshape(-1, d)
    w = np.asarray(w, dtype=np.float64)
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=np.float64)
    F = np.linalg.cholesky(sigma) if sigma_factor is None else sigma_factor
    if W_c.shape[0] == 0:
        w_tilde = np.zeros(0)
    else:
        A = F.T @ W_c.T  # d x k
        w_tilde, *_ = np.linalg.lstsq(A, F.T @ w, rcond=PINV_RCOND)
        if not np.all(np.isfinite(w_tilde)):
            raise ArithmeticError("least-squares solve produced non-finite weights")
    r = w - W_c.T @ w_tilde
    Fr = F.T @ r
    error = float(Fr @ Fr)
    b_tilde = float(r @ mu + b)
    return w_tilde, b_tilde, error


def theorem_bound(k: int, d: int, lambda_max: float, w) -> float:
    """``lambda_max * (1 - k/d) * ||w||^2`` for ``k < d``, else 0."""
    if k < 0 or d < 1:
        raise ValueError("need k >= 0 and d >= 1")
    if k >= d:
        return 0.0
    w = np.asarray(w, dtype=np.float64)
    return float(lambda_max * (1.0 - k / d) * (w @ w))


def multiclass_bound(k: int, d: int, lambda_max: float, rows_of_W) -> float:
    """Sum of per-row bounds; never larger than ``C * max_i`` of them."""
    return float(sum(theorem_bound(k, d, lambda_max, w) for w in rows_of_W))


def _trial_generators(seed: int, k: int, trials: int):
    ss = np.random.SeedSequence([seed, k])
    return [np.random.default_rng(s) for s in ss.spawn(trials)]


def run_leakage_experiment(setup: LeakageSetup) -> LeakageResult:
    """Mean and spread of the optimal error over ``trials`` Gaussian ``W_c``
    draws for every ``k`` in ``setup.k_grid``."""
    F = np.linalg.cholesky(setup.sigma)
    lam = setup.lambda_max
    per_k = {}
    exact = 0.0
    for k in setup.k_grid:
        errs = np.empty(setup.trials)
        for t, rng in enumerate(_trial_generators(setup.seed, k, setup.trials)):
            W_c = rng.standard_normal((k, setup.d))
            _, _, errs[t] = optimal_approximator(W_c, setup.sigma, setup.mu, setup.w,
                                                 setup.b, sigma_factor=F)
        per_k[k] = KResult(k, float(errs.mean()), float(errs.std(ddof=1)) if errs.size > 1
                           else 0.0, theorem_bound(k, setup.d, lam, setup.w), errs)
        if k >= setup.d:
            exact = max(exact, float(errs.max()))
    return LeakageResult(per_k, lam, float(setup.w @ setup.w), exact)


def check_bounds(result: LeakageResult, d: int, slack: float = 0.02,
                 exact_tol: float = 1e-8) -> dict[str, bool]:
    """Named pass/fail flags for a :class:`LeakageResult`."""
    scale = result.lambda_max * result.w_norm_sq
    below = [r for r in result.per_k.values() if r.k < d]
    above = [r for r in result.per_k.values() if r.k >= d]
    means = [r.mean_error for r in sorted(below, key=lambda r: r.k)]
    return {
        "bound_k_lt_d": all(r.mean_error <= r.bound * (1 + slack) for r in below),
        "exact_k_ge_d": all(float(r.errors.max()) <= exact_tol * scale for r in above),
        "strictly_decreasing": all(a > b for a, b in zip(means, means[1:])),
    }


def run_multiclass_experiment(setup: LeakageSetup, rows_of_W) -> dict[int, tuple[float, float]]:
    """Per k: (summed mean error over class rows, summed bound)."""
    F = np.linalg.cholesky(setup.sigma)
    rows_of_W = [np.asarray(r, dtype=np.float64) for r in rows_of_W]
    lam = setup.lambda_max
    out = {}
    for k in setup.k_grid:
        total = np.zeros(setup.trials)
        for t, rng in enumerate(_trial_generators(setup.seed, k, setup.trials)):
            W_c = rng.standard_normal((k, setup.d))
            for w in rows_of_W:
                total[t] += optimal_approximator(W_c, setup.sigma, setup.mu, w,
                                                 sigma_factor=F)[2]
        out[k] = (float(total.mean()), multiclass_bound(k, setup.d, lam, rows_of_W))
    return out


def check_multiclass(per_k: dict[int, tuple[float, float]], d: int, lambda_max: float,
                     rows_of_W, exact_tol: float = 1e-8) -> bool:
    """Summed errors never exceed the summed bounds (no slack); for ``k >= d``
    where the bound is 0 they must vanish up to ``exact_tol`` relative."""
    scale = lambda_max * float(sum(np.dot(w, w) for w in np.asarray(rows_of_W, dtype=float)))
    for k, (err, bound) in per_k.items():
        if k < d and not err <= bound:
            return False
        if k >= d and not err <= exact_tol * scale:
            return False
    return True


def random_cbl(d: int, k: int, seed: int) -> ConceptBottleneck:
    """Bias-free concept layer with i.i.d. standard Gaussian weights."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng([seed, 0xCB1])
    return ConceptBottleneck(weights=rng.standard_normal((k, d)))


def random_cbl_baseline(train_embeddings, train_labels, val_embeddings=None,
                        val_labels=None, k: int = 64, seed: int = 0, **path_kwargs,
                        ) -> tuple[ConceptBottleneck, RegularizationPath]:
    """Random concept layer, normalised on the training embeddings, followed
    by the usual sparse regularisation path on its logits."""
    Z = np.asarray(train_embeddings, dtype=np.float64)
    cb = fit_normalization(random_cbl(Z.shape[1], k, seed), Z)
    Xv = None if val_embeddings is None else predict_concepts(cb, val_embeddings, True)
    path = solve_path(predict_concepts(cb, Z, True), train_labels, Xv, val_labels,
                      **path_kwargs)
    return cb, path
