"""Smooth posterior sampling.

The probability of sending a prompt is the posterior expectation of a
generalized logistic link applied to the sampled advantage ``s' beta``. Since
``s' beta`` is univariate Gaussian under the posterior, the expectation is a
one-dimensional integral, computed by Gauss-Hermite quadrature. When the link
is steep relative to the posterior spread, a fixed Gauss-Hermite rule cannot
resolve the transition and a composite Gauss-Legendre rule takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, NumericalFailure
from .model_core import StateVector
from .seeding import uniform_from_seed

DEFAULT_QUAD_NODES = 50
NEGATIVE_VARIANCE_TOL = 1e-10
# steepness x posterior sd above which Gauss-Hermite is replaced by panels
STEEP_SCALE = 2.0
_LEGENDRE_POINTS = 20
_TAIL_SD = 10.0
_MAX_PANELS = 20_000

STATE_KINDS = ("actual", "modified", "fixed")


@dataclass(frozen=True)
class LogisticParams:
    l_min: float = 0.2
    l_max: float = 0.8
    steepness_b: float = 1.0
    offset_c: float = 1.0
    shape_k: float = 1.0

    def __post_init__(self):
        values = (self.l_min, self.l_max, self.steepness_b, self.offset_c, self.shape_k)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError("logistic parameters must be finite")
        if not 0.0 < self.l_min < self.l_max < 1.0:
            raise InvalidInputError(
                f"need 0 < l_min < l_max < 1, got l_min={self.l_min}, l_max={self.l_max}"
            )
        if not self.l_min <= 0.5 <= self.l_max:
            raise InvalidInputError("the clip interval must contain 0.5")
        if self.steepness_b <= 0 or self.offset_c <= 0 or self.shape_k <= 0:
            raise InvalidInputError("steepness_b, offset_c and shape_k must be positive")


@dataclass(frozen=True)
class DecisionOutcome:
    pi: float
    action: int
    rng_seed: int
    policy_version: str
    state_used: StateVector | None
    state_kind: str


def rho(x, params: LogisticParams):
    """Generalized logistic link ``l_min + (l_max - l_min) / (1 + c exp(-b x))^k``.

    Evaluated as ``exp(-k * log(1 + c exp(-b x)))`` so extreme ``x`` returns the
    asymptotes instead of overflowing.
    """
    x = np.asarray(x, dtype=float)
    log_denom = np.logaddexp(0.0, math.log(params.offset_c) - params.steepness_b * x)
    value = params.l_min + (params.l_max - params.l_min) * np.exp(-params.shape_k * log_denom)
    # l_min + (l_max - l_min) * 1.0 can round one ulp past l_max
    value = np.clip(value, params.l_min, params.l_max)
    return float(value) if value.ndim == 0 else value


@lru_cache(maxsize=16)
def _hermgauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    return nodes, weights / math.sqrt(math.pi)


def advantage_moments(
    state: StateVector, beta_marginal: tuple[np.ndarray, np.ndarray]
) -> tuple[float, float]:
    """Mean and variance of ``f(s)' beta`` under the advantage posterior."""
    mu, sigma = beta_marginal
    f = state.as_array()
    m = float(f @ mu)
    v = float(f @ sigma @ f)
    if not (math.isfinite(m) and math.isfinite(v)):
        raise NumericalFailure("non-finite advantage moments")
    if v < 0.0:
        if v < -NEGATIVE_VARIANCE_TOL:
            raise NumericalFailure(f"advantage variance {v} is negative beyond roundoff")
        v = 0.0
    return m, v


@lru_cache(maxsize=4)
def _leggauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def _panel_expectation(m: float, sd: float, params: LogisticParams) -> float:
    """E[rho(m + sd T)], T standard normal, by composite Gauss-Legendre on [-10, 10].

    Panels are at most ``4 / b`` wide in the original scale, so each logistic
    transition spans several panels' worth of nodes. Mass beyond 10 sd is
    below 1e-22 and is ignored.
    """
    n_panels = min(_MAX_PANELS, max(8, math.ceil(5.0 * params.steepness_b * sd)))
    x, w = _leggauss(_LEGENDRE_POINTS)
    edges = np.linspace(-_TAIL_SD, _TAIL_SD, n_panels + 1)
    half = 0.5 * np.diff(edges)
    t = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * x[None, :]
    density = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    return float(np.sum(half[:, None] * w[None, :] * density * rho(m + sd * t, params)))


def gaussian_expectation_of_rho(
    m: float, v: float, params: LogisticParams, quad_nodes: int = DEFAULT_QUAD_NODES
) -> float:
    """``E[rho(Z)]`` for ``Z ~ N(m, v)``, clipped to ``[l_min, l_max]``.

    Uses a ``quad_nodes``-point Gauss-Hermite rule unless ``b * sqrt(v)``
    exceeds ``STEEP_SCALE``, where the composite rule is used instead.
    """
    if quad_nodes < 1:
        raise InvalidInputError("quad_nodes must be at least 1")
    if v == 0.0:
        return rho(m, params)
    sd = math.sqrt(v)
    if params.steepness_b * sd > STEEP_SCALE:
        value = _panel_expectation(m, sd, params)
    else:
        nodes, weights = _hermgauss(quad_nodes)
        value = float(weights @ rho(m + math.sqrt(2.0) * sd * nodes, params))
    # weights sum to 1 only up to roundoff
    return min(max(value, params.l_min), params.l_max)


def action_selection_prob(
    state: StateVector,
    beta_marginal: tuple[np.ndarray, np.ndarray],
    params: LogisticParams,
    quad_nodes: int = DEFAULT_QUAD_NODES,
) -> float:
    m, v = advantage_moments(state, beta_marginal)
    return gaussian_expectation_of_rho(m, v, params, quad_nodes)


def mc_action_selection_prob(
    state: StateVector,
    beta_marginal: tuple[np.ndarray, np.ndarray],
    params: LogisticParams,
    n_draws: int,
    seed: int,
) -> float:
    """Monte Carlo estimate of the same expectation, drawing full advantage vectors.

    Kept independent of the quadrature path on purpose: it never forms the
    univariate moments.
    """
    if n_draws < 1:
        raise InvalidInputError("n_draws must be at least 1")
    mu, sigma = beta_marginal
    rng = np.random.default_rng(seed)
    draws = rng.multivariate_normal(mu, sigma, size=n_draws, method="eigh")
    return float(np.mean(rho(draws @ state.as_array(), params)))


def sample_action(pi: float, seed: int) -> int:
    if not (math.isfinite(pi) and 0.0 <= pi <= 1.0):
        raise InvalidInputError(f"pi must lie in [0, 1], got {pi}")
    return int(uniform_from_seed(seed) < pi)


def sample_actions(pis: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sample_action`; identical draws entry by entry."""
    pis = np.asarray(pis, dtype=float)
    if not (np.all(np.isfinite(pis)) and np.all((pis >= 0.0) & (pis <= 1.0))):
        raise InvalidInputError("every pi must lie in [0, 1]")
    return (uniform_from_seed(seeds) < pis).astype(np.int8)
