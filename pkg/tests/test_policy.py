import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mc_expectation_of_rho, rho_mp
from trialfidelity.errors import InvalidInputError, NumericalFailure
from trialfidelity.model_core import StateVector
from trialfidelity.policy import (
    LogisticParams,
    action_selection_prob,
    advantage_moments,
    gaussian_expectation_of_rho,
    mc_action_selection_prob,
    rho,
    sample_action,
    sample_actions,
)
from trialfidelity.seeding import derive_seed, entry_seeds, mix64, uniform_from_seed

DEFAULT = LogisticParams()

params_strategy = st.builds(
    LogisticParams,
    l_min=st.floats(0.01, 0.49),
    l_max=st.floats(0.51, 0.99),
    steepness_b=st.floats(0.1, 5),
    offset_c=st.floats(0.1, 5),
    shape_k=st.floats(0.2, 4),
)


class TestLogisticParams:
    @pytest.mark.parametrize("kw", [
        {"l_min": 0.6, "l_max": 0.4},
        {"l_min": 0.0},
        {"l_max": 1.0},
        {"l_min": 0.55, "l_max": 0.9},
        {"steepness_b": 0.0},
        {"offset_c": -1.0},
        {"shape_k": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInputError):
            LogisticParams(**kw)


class TestRho:
    def test_lower_asymptote(self):
        assert abs(rho(-1e6, DEFAULT) - DEFAULT.l_min) <= 1e-12

    def test_upper_asymptote(self):
        assert abs(rho(1e6, DEFAULT) - DEFAULT.l_max) <= 1e-12

    @pytest.mark.parametrize("b", [0.1, 1.0, 7.0])
    def test_midpoint(self, b):
        assert rho(0.0, LogisticParams(steepness_b=b)) == pytest.approx(0.5, abs=1e-15)

    def test_high_precision_formula(self):
        p = LogisticParams(l_min=0.1, l_max=0.9, offset_c=3.0, steepness_b=2.0, shape_k=2.0)
        # frozen from the mpmath oracle at 50 digits
        assert rho(1.0, p) == pytest.approx(0.50468371842087208533, abs=1e-15)
        assert rho(1.0, p) == pytest.approx(float(rho_mp(1, 0.1, 0.9, 2, 3, 2)), abs=1e-15)

    @given(params_strategy, st.floats(-50, 50), st.floats(1e-3, 10))
    def test_strictly_increasing_in_open_range(self, p, x, dx):
        lo, hi = rho(x, p), rho(x + dx, p)
        assert p.l_min <= lo <= hi <= p.l_max
        assert lo < hi or hi in (p.l_min, p.l_max) or lo in (p.l_min, p.l_max) or \
            math.isclose(lo, hi, rel_tol=1e-15)

    @given(params_strategy, st.floats(-30, 30))
    def test_matches_mpmath(self, p, x):
        expected = float(rho_mp(x, p.l_min, p.l_max, p.steepness_b, p.offset_c, p.shape_k))
        assert rho(x, p) == pytest.approx(expected, rel=1e-12, abs=1e-14)

    def test_vectorized(self):
        xs = np.linspace(-5, 5, 11)
        np.testing.assert_array_equal(rho(xs, DEFAULT), [rho(float(x), DEFAULT) for x in xs])


class TestQuadrature:
    def test_zero_variance_is_rho_of_mean(self):
        assert gaussian_expectation_of_rho(0.7, 0.0, DEFAULT, 50) == rho(0.7, DEFAULT)

    @pytest.mark.parametrize("v", [0.01, 1.0, 25.0])
    def test_symmetry_at_zero_mean(self, v):
        assert gaussian_expectation_of_rho(0.0, v, DEFAULT, 50) == pytest.approx(0.5, abs=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(params_strategy, st.floats(-4, 4), st.floats(0.0, 9.0), st.integers(0, 2**31))
    def test_matches_monte_carlo(self, p, m, v, seed):
        mc = mc_expectation_of_rho(m, v, p.l_min, p.l_max, p.steepness_b, p.offset_c,
                                   p.shape_k, n=10**6, seed=seed)
        assert abs(gaussian_expectation_of_rho(m, v, p, 50) - mc) <= 3e-3

    def test_doubling_nodes_is_converged(self):
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(500):
            p = LogisticParams(l_min=rng.uniform(0.05, 0.45), l_max=rng.uniform(0.55, 0.95),
                               steepness_b=rng.uniform(0.1, 5), offset_c=rng.uniform(0.2, 5),
                               shape_k=rng.uniform(0.3, 3))
            m, v = rng.uniform(-5, 5), rng.uniform(0, 25)
            worst = max(worst, abs(gaussian_expectation_of_rho(m, v, p, 50)
                                   - gaussian_expectation_of_rho(m, v, p, 100)))
        assert worst < 1e-6

    @given(params_strategy, st.lists(st.floats(-3, 3), min_size=5, max_size=5),
           st.lists(st.floats(0, 2), min_size=5, max_size=5), st.floats(0.01, 4),
           st.integers(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1))
    def test_monotone_in_advantage_mean(self, p, mu, bump, scale, tod, b, a, app):
        # features are non-negative, so raising any mean coordinate cannot lower pi
        state = StateVector(1.0, tod, b, a, app)
        sigma = scale * np.eye(5)
        lo = action_selection_prob(state, (np.array(mu), sigma), p)
        hi = action_selection_prob(state, (np.array(mu) + np.array(bump), sigma), p)
        assert hi >= lo - 1e-15

    def test_result_inside_clip_range(self):
        for m in (-100.0, 0.0, 100.0):
            val = gaussian_expectation_of_rho(m, 50.0, DEFAULT, 50)
            assert DEFAULT.l_min <= val <= DEFAULT.l_max

    def test_tiny_negative_variance_clamped(self):
        state = StateVector(1.0, 0, 0.0, 0.0, 0)
        sigma = np.zeros((5, 5))
        sigma[0, 0] = -1e-12
        m, v = advantage_moments(state, (np.zeros(5), sigma))
        assert v == 0.0

    def test_negative_variance_fails(self):
        state = StateVector(1.0, 0, 0.0, 0.0, 0)
        sigma = np.zeros((5, 5))
        sigma[0, 0] = -1e-3
        with pytest.raises(NumericalFailure):
            action_selection_prob(state, (np.zeros(5), sigma), DEFAULT)


class TestMonteCarloPath:
    def test_single_draw_zero_covariance(self):
        state = StateVector(1.0, 1, 0.3, 0.2, 1)
        mu = np.array([0.1, 0.4, -0.2, 0.3, 0.5])
        got = mc_action_selection_prob(state, (mu, np.zeros((5, 5))), DEFAULT, 1, 0)
        assert got == pytest.approx(rho(float(mu @ state.as_array()), DEFAULT), abs=1e-15)

    def test_deterministic(self):
        state = StateVector(1.0, 1, 0.3, 0.2, 1)
        beta = (np.full(5, 0.1), 0.5 * np.eye(5))
        assert mc_action_selection_prob(state, beta, DEFAULT, 1000, 4) == \
            mc_action_selection_prob(state, beta, DEFAULT, 1000, 4)

    def test_agrees_with_quadrature(self):
        state = StateVector(1.0, 1, 0.6, 0.4, 0)
        beta = (np.array([0.2, 0.5, -0.3, 0.1, 0.0]), 0.3 * np.eye(5))
        mc = mc_action_selection_prob(state, beta, DEFAULT, 10**6, 11)
        assert abs(action_selection_prob(state, beta, DEFAULT) - mc) <= 3e-3


class TestSampling:
    def test_pi_zero_and_one(self):
        for seed in range(200):
            assert sample_action(0.0, seed) == 0
            assert sample_action(1.0, seed) == 1

    def test_rejects_bad_pi(self):
        with pytest.raises(InvalidInputError):
            sample_action(1.5, 0)
        with pytest.raises(InvalidInputError):
            sample_actions(np.array([0.5, np.nan]), np.array([1, 2], dtype=np.uint64))

    def test_half_probability_frequency(self):
        seeds = entry_seeds(derive_seed(2024), 10**5)
        mean = sample_actions(np.full(10**5, 0.5), seeds).mean()
        assert 0.49 <= mean <= 0.51

    def test_scalar_and_vector_agree(self):
        seeds = entry_seeds(99, 300)
        pis = np.linspace(0, 1, 300)
        vec = sample_actions(pis, seeds)
        assert [sample_action(float(p), int(s)) for p, s in zip(pis, seeds)] == vec.tolist()

    @given(st.floats(0, 1), st.integers(0, 2**64 - 1))
    def test_monotone_in_pi(self, pi, seed):
        # one uniform per seed: raising pi can only turn a 0 into a 1
        assert sample_action(pi, seed) <= sample_action(min(1.0, pi + 0.1), seed)


class TestSeeding:
    def test_derive_seed_is_stable_and_sensitive(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
        assert derive_seed(12, 3) != derive_seed(1, 23)

    def test_uniform_range(self):
        u = uniform_from_seed(np.arange(10**4, dtype=np.uint64))
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_mix64_known_value(self):
        # first output of the reference SplitMix64 generator started from state 0
        assert int(mix64(np.uint64(0))) == 0xE220A8397B1DCDAF
