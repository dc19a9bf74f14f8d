"""Independent reference computations used by the tests.

None of these call into the package's numerical paths. Running this file
prints the frozen values that the tests assert.
"""

from __future__ import annotations

from fractions import Fraction

import mpmath
import numpy as np


def dense_posterior(mu0, sigma0, noise_var, phi, rewards):
    """Normal equations with explicit inverses (no Cholesky)."""
    prior_prec = np.linalg.inv(sigma0)
    precision = prior_prec + phi.T @ phi / noise_var
    sigma = np.linalg.inv(precision)
    mu = sigma @ (prior_prec @ mu0 + phi.T @ rewards / noise_var)
    return mu, sigma


def termwise_reward_mean(theta, state, pi, action):
    """alpha0.f + pi alpha1.f + (a - pi) beta.f, one scalar term at a time."""
    a0, a1, beta = theta[:5], theta[5:10], theta[10:]
    total = 0.0
    for j in range(5):
        total += a0[j] * state[j]
        total += pi * a1[j] * state[j]
        total += (action - pi) * beta[j] * state[j]
    return total


def rho_mp(x, l_min, l_max, b, c, k, dps=50):
    with mpmath.workdps(dps):
        x, l_min, l_max, b, c, k = map(mpmath.mpf, (x, l_min, l_max, b, c, k))
        return l_min + (l_max - l_min) / (1 + c * mpmath.exp(-b * x)) ** k


def mc_expectation_of_rho(m, v, l_min, l_max, b, c, k, n=10**6, seed=12345):
    """E[rho(Z)], Z ~ N(m, v), from standard-normal draws."""
    z = m + np.sqrt(v) * np.random.default_rng(seed).standard_normal(n)
    return float(np.mean(l_min + (l_max - l_min) / (1.0 + c * np.exp(-b * z)) ** k))


def exp_average_exact(history_oldest_first, window=14, gamma=Fraction(13, 14)):
    recent = list(history_oldest_first)[-window:][::-1]
    num = sum(Fraction(x) * gamma**j for j, x in enumerate(recent) if x is not None)
    den = sum(gamma**j for j, x in enumerate(recent) if x is not None)
    return num / den if den else Fraction(0)


def binomial_tail_halfwidth(n, p=0.5, z=6.0):
    """Half-width of a z-sigma band for a binomial mean; 6 sigma keeps flakes out."""
    return z * np.sqrt(p * (1 - p) / n)


if __name__ == "__main__":
    print("rho(1; 0.1, 0.9, b=2, c=3, k=2) =", mpmath.nstr(rho_mp(1, 0.1, 0.9, 2, 3, 2), 20))
    print("exp avg [10,20,30] =", exp_average_exact([10, 20, 30]),
          float(exp_average_exact([10, 20, 30])))
    mixed = [120, None, 200, 90, 60]
    print("b_bar mixed =", float(exp_average_exact([None if q is None else min(q, 180) for q in mixed]) / 180))
    prompts = [1, 0, 1, 1]
    print("a_bar mixed =", float(exp_average_exact(prompts)))
    print("binomial 6-sigma half-width at 1e5:", binomial_tail_halfwidth(10**5),
          "at 1e4:", binomial_tail_halfwidth(10**4))
    p = 1 / 3
    print("category 6-sigma half-width at 1e5:", 6 * np.sqrt(p * (1 - p) / 10**5))
