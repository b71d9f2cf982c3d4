"""How much of a linear target can a random concept layer reproduce?

For ``z ~ N(mu, Sigma)`` and a target ``f(z) = w^T z``, the best linear head on
``k`` random Gaussian concept logits leaves an expected squared error of at
most ``lambda_max(Sigma) (1 - k/d) ||w||^2``, and none once ``k >= d``.
This script prints the measured error next to that bound and spot-checks one
closed-form value with Monte Carlo:

    python3 demos/leakage_bound.py
"""
import numpy as np

from groundcbm.leakage import (LeakageSetup, check_bounds, optimal_approximator,
                               run_leakage_experiment)
from groundcbm.synth import mc_error_oracle


def main(d=64, trials=1000):
    setup = LeakageSetup.random(d=d, seed=0, k_grid=(1, 8, 16, 32, 48, 63, 64, 80),
                                trials=trials)
    result = run_leakage_experiment(setup)
    print(f"d={d}, {trials} random layers per k, lambda_max={result.lambda_max:.2f}, "
          f"||w||^2={result.w_norm_sq:.2f}\n")
    print("   k   mean error    std error        bound   error/bound")
    for k, mean, std, bound in result.rows():
        ratio = f"{mean / bound:10.4f}" if bound > 0 else "         -"
        print(f"{k:4d} {mean:12.4g} {std:12.4g} {bound:12.4g}  {ratio}")
    print("\nchecks:", check_bounds(result, d))

    # One closed-form error against a million Monte Carlo samples.
    rng = np.random.default_rng(1)
    W_c = rng.standard_normal((16, d))
    w_t, b_t, err = optimal_approximator(W_c, setup.sigma, setup.mu, setup.w)
    est, se = mc_error_oracle(W_c, setup.sigma, setup.mu, setup.w, 0.0, w_t, b_t)
    print(f"\nk=16 closed form {err:.4f}, Monte Carlo {est:.4f} +- {se:.4f} "
          f"({abs(est - err) / se:.2f} standard errors apart)")


if __name__ == "__main__":
    main()
