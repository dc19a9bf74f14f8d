"""Action-centered Bayesian linear reward model.

The mean reward at a decision time is modelled as

    R = f(s)' a0 + pi * f(s)' a1 + (a - pi) * f(s)' beta + noise,

with ``noise ~ N(0, noise_var)``. Stacking ``theta = (a0, a1, beta)`` makes the
model linear in a 15-dimensional parameter, so a single Gaussian conjugate
update covers all three blocks. The prior is block-diagonal; posteriors are
dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, NumericalFailure

N_FEATURES = 5
N_PARAMS = 3 * N_FEATURES
BETA_SLICE = slice(2 * N_FEATURES, 3 * N_FEATURES)

FEATURE_NAMES = ("bias", "time_of_day", "b_bar", "a_bar", "app_engagement")


@dataclass(frozen=True)
class StateVector:
    """The five features the reward model and the policy see."""

    bias: float = 1.0
    time_of_day: int = 0
    b_bar: float = 0.0
    a_bar: float = 0.0
    app_engagement: int = 0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"non-finite state entry: {values.tolist()}")
        if self.bias != 1.0:
            raise InvalidInputError(f"bias must be 1.0, got {self.bias}")
        if self.time_of_day not in (0, 1):
            raise InvalidInputError(f"time_of_day must be 0 or 1, got {self.time_of_day}")
        if self.app_engagement not in (0, 1):
            raise InvalidInputError(f"app_engagement must be 0 or 1, got {self.app_engagement}")
        if not 0.0 <= self.a_bar <= 1.0:
            raise InvalidInputError(f"a_bar must lie in [0, 1], got {self.a_bar}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.bias, self.time_of_day, self.b_bar, self.a_bar, self.app_engagement],
            dtype=float,
        )

    def to_list(self) -> list[float]:
        return [float(v) for v in self.as_array()]

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "StateVector":
        if len(values) != N_FEATURES:
            raise InvalidInputError(f"expected {N_FEATURES} features, got {len(values)}")
        bias, tod, b_bar, a_bar, app = values
        return cls(float(bias), int(tod), float(b_bar), float(a_bar), int(app))


def _check_spd(matrix: np.ndarray, name: str) -> None:
    if matrix.shape[0] != matrix.shape[1] or not np.allclose(matrix, matrix.T, atol=1e-12):
        raise InvalidInputError(f"{name} must be symmetric")
    try:
        linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as exc:
        raise InvalidInputError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class PriorSpec:
    mu_alpha0: np.ndarray
    sigma_alpha0: np.ndarray
    mu_alpha1: np.ndarray
    sigma_alpha1: np.ndarray
    mu_beta: np.ndarray
    sigma_beta: np.ndarray
    noise_var: float = 1.0

    def __post_init__(self):
        for name in ("mu_alpha0", "mu_alpha1", "mu_beta"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (N_FEATURES,) or not np.all(np.isfinite(vec)):
                raise InvalidInputError(f"{name} must be a finite length-{N_FEATURES} vector")
            object.__setattr__(self, name, vec)
        for name in ("sigma_alpha0", "sigma_alpha1", "sigma_beta"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != (N_FEATURES, N_FEATURES):
                raise InvalidInputError(f"{name} must be {N_FEATURES}x{N_FEATURES}")
            _check_spd(mat, name)
            object.__setattr__(self, name, mat)
        if not (np.isfinite(self.noise_var) and self.noise_var > 0):
            raise InvalidInputError(f"noise_var must be positive, got {self.noise_var}")

    @classmethod
    def default(cls, prior_scale: float = 1.0, noise_var: float = 1.0) -> "PriorSpec":
        zero = np.zeros(N_FEATURES)
        cov = prior_scale * np.eye(N_FEATURES)
        return cls(zero, cov, zero, cov, zero, cov, noise_var)

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mu_alpha0, self.mu_alpha1, self.mu_beta])

    @property
    def cov(self) -> np.ndarray:
        return linalg.block_diag(self.sigma_alpha0, self.sigma_alpha1, self.sigma_beta)


@dataclass(frozen=True)
class PosteriorState:
    mu_post: np.ndarray
    sigma_post: np.ndarray
    update_index: int = 0
    trained_on: int = 0
    version_id: str = "v0"
    noise_var: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mu_post", np.asarray(self.mu_post, dtype=float))
        object.__setattr__(self, "sigma_post", np.asarray(self.sigma_post, dtype=float))
        if self.mu_post.shape != (N_PARAMS,) or self.sigma_post.shape != (N_PARAMS, N_PARAMS):
            raise InvalidInputError("posterior must be 15-dimensional")
        if self.update_index < 0:
            raise InvalidInputError("update_index must be non-negative")

    @classmethod
    def from_prior(cls, prior: PriorSpec) -> "PosteriorState":
        return cls(prior.mean, prior.cov, 0, 0, version_id(0), prior.noise_var)

    def to_dict(self) -> dict:
        return {
            "mu_post": self.mu_post.tolist(),
            "sigma_post": self.sigma_post.tolist(),
            "update_index": self.update_index,
            "trained_on": self.trained_on,
            "version_id": self.version_id,
            "noise_var": self.noise_var,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PosteriorState":
        return cls(
            np.array(data["mu_post"], dtype=float),
            np.array(data["sigma_post"], dtype=float),
            int(data["update_index"]),
            int(data["trained_on"]),
            str(data["version_id"]),
            float(data["noise_var"]),
        )


def version_id(update_index: int) -> str:
    return f"v{update_index}"


@dataclass(frozen=True)
class TrainingTuple:
    participant_id: int
    decision_index: int
    state: StateVector
    pi: float
    action: int
    reward: float | None = None
    complete: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise InvalidInputError(f"pi must lie in [0, 1], got {self.pi}")
        if self.action not in (0, 1):
            raise InvalidInputError(f"action must be 0 or 1, got {self.action}")
        if not self.complete and self.reward is not None:
            raise InvalidInputError("an incomplete tuple cannot carry a reward")
        if self.complete and (self.reward is None or not np.isfinite(self.reward)):
            raise InvalidInputError("a complete tuple needs a finite reward")


def build_design_row(state: StateVector, pi: float, action: float) -> np.ndarray:
    """Return ``[f(s), pi f(s), (a - pi) f(s)]``.

    ``action`` is normally 0 or 1, but any real value is accepted so callers can
    evaluate the hypothetical ``a = pi`` that zeroes the advantage block.
    """
    if not 0.0 <= pi <= 1.0:
        raise InvalidInputError(f"pi must lie in [0, 1], got {pi}")
    f = state.as_array()
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("non-finite state entry")
    return np.concatenate([f, pi * f, (action - pi) * f])


def design_matrix(batch: Sequence[TrainingTuple]) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        return np.zeros((0, N_PARAMS)), np.zeros(0)
    phi = np.vstack([build_design_row(t.state, t.pi, t.action) for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=float)
    return phi, rewards


def _prior_moments(prior: PriorSpec | PosteriorState) -> tuple[np.ndarray, np.ndarray, float, int, int]:
    if isinstance(prior, PriorSpec):
        return prior.mean, prior.cov, prior.noise_var, 0, 0
    return prior.mu_post, prior.sigma_post, prior.noise_var, prior.update_index, prior.trained_on


def posterior_update(
    prior: PriorSpec | PosteriorState,
    batch: Iterable[TrainingTuple],
    *,
    update_index: int | None = None,
) -> PosteriorState:
    """Exact conjugate posterior of the linear model with known noise variance.

    ``prior`` may be a :class:`PriorSpec` (block-diagonal) or an earlier
    :class:`PosteriorState`, which is then used as a full 15-dimensional Gaussian
    prior. ``update_index`` overrides the default of ``prior index + 1``.

    Raises
    ------
    InvalidInputError
        If the batch contains an incomplete tuple.
    NumericalFailure
        If the prior covariance or the posterior precision fails its Cholesky
        factorization. No regularization is attempted.
    """
    batch = list(batch)
    if any(not t.complete for t in batch):
        raise InvalidInputError("incomplete tuples must be filtered out before updating")
    mu0, sigma0, noise_var, prev_index, prev_count = _prior_moments(prior)
    new_index = prev_index + 1 if update_index is None else update_index
    if not batch:
        return PosteriorState(
            mu0.copy(), sigma0.copy(), new_index, prev_count, version_id(new_index), noise_var
        )

    phi, rewards = design_matrix(batch)
    return posterior_from_arrays(
        mu0, sigma0, noise_var, phi, rewards,
        update_index=new_index, trained_on=prev_count + len(batch),
    )


def posterior_from_arrays(
    mu0: np.ndarray,
    sigma0: np.ndarray,
    noise_var: float,
    phi: np.ndarray,
    rewards: np.ndarray,
    *,
    update_index: int,
    trained_on: int,
) -> PosteriorState:
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(rewards))):
        raise NumericalFailure("non-finite values in design matrix or rewards")
    eye = np.eye(len(mu0))
    try:
        prior_factor = linalg.cho_factor(sigma0, lower=True)
        prior_precision = linalg.cho_solve(prior_factor, eye)
        precision = prior_precision + (phi.T @ phi) / noise_var
        precision = 0.5 * (precision + precision.T)
        post_factor = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalFailure("posterior precision is not positive definite") from exc
    sigma_post = linalg.cho_solve(post_factor, eye)
    sigma_post = 0.5 * (sigma_post + sigma_post.T)
    rhs = prior_precision @ mu0 + (phi.T @ rewards) / noise_var
    mu_post = linalg.cho_solve(post_factor, rhs)
    if not (np.all(np.isfinite(mu_post)) and np.all(np.isfinite(sigma_post))):
        raise NumericalFailure("posterior moments are not finite")
    return PosteriorState(
        mu_post, sigma_post, update_index, trained_on, version_id(update_index), noise_var
    )


def predict_reward_mean(
    posterior: PosteriorState, state: StateVector, pi: float, action: float
) -> float:
    return float(build_design_row(state, pi, action) @ posterior.mu_post)


def marginal_advantage_posterior(posterior: PosteriorState) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the advantage block (the last five coordinates)."""
    return (
        posterior.mu_post[BETA_SLICE].copy(),
        posterior.sigma_post[BETA_SLICE, BETA_SLICE].copy(),
    )
