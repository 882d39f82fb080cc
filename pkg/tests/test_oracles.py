import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpght.network import TIME_FLOOR, StochasticNetwork, build_synthetic, normal_cdf
from gpght.oracles import (
    OracleError,
    OracleResult,
    conditional,
    exhaustive_policy_value,
    fixed_route_value,
    oracle_policy_rollout_value,
    solve_budget,
    synthetic_upper_bound,
)

# Budget at which the synthetic optimal-policy value equals 0.537.  Frozen from an
# independent computation (scipy.integrate.quad of the same integrand at 1e-13
# tolerance, root found with scipy.optimize.brentq).
T_STAR = 105.99992259717969


class TestConditional:
    def test_second_given_first(self, synthetic):
        law = conditional(synthetic.sigma, synthetic.mu, [0], 1)
        assert law.slope[0] == pytest.approx(0.5, abs=1e-15)
        assert law.intercept == pytest.approx(97.5, abs=1e-12)
        assert law.variance == pytest.approx(1.75, abs=1e-15)

    def test_third_given_first(self, synthetic):
        law = conditional(synthetic.sigma, synthetic.mu, [0], 2)
        assert law.slope[0] == 0.0 and law.intercept == 100.0 and law.variance == 2.0

    def test_empty_conditioning_is_marginal(self, synthetic):
        law = conditional(synthetic.sigma, synthetic.mu, [], 1)
        assert (law.intercept, law.variance, law.mean([])) == (100.0, 2.0, 100.0)

    def test_singular_block_rejected(self, synthetic):
        with pytest.raises(OracleError):
            conditional(synthetic.sigma, synthetic.mu, [3], 1)

    def test_sampling_reproduces_covariance(self, synthetic):
        rng = np.random.default_rng(0)
        n = 100_000
        law = conditional(synthetic.sigma, synthetic.mu, [0], 1)
        x1 = 5.0 + rng.standard_normal(n)
        x2 = law.slope[0] * x1 + law.intercept + math.sqrt(law.variance) * rng.standard_normal(n)
        prod = (x1 - x1.mean()) * (x2 - x2.mean())
        assert abs(prod.mean() - 0.5) <= 3 * prod.std() / math.sqrt(n)


class TestUpperBound:
    def test_limits(self):
        assert synthetic_upper_bound(1e6).value == pytest.approx(1.0, abs=1e-9)
        assert synthetic_upper_bound(0.0).value < 1e-12

    def test_value_at_t_star(self):
        res = synthetic_upper_bound(T_STAR)
        assert abs(res.value - 0.537) <= 0.001
        assert res.method == "quadrature" and res.error_estimate < 1e-6

    def test_solve_budget(self):
        assert solve_budget(0.537) == pytest.approx(T_STAR, abs=1e-6)
        with pytest.raises(OracleError):
            solve_budget(1.5)

    def test_monotone_on_grid(self):
        values = [synthetic_upper_bound(t).value for t in np.linspace(95, 117, 100)]
        assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(90, 125))
    def test_dominates_fixed_routes(self, budget):
        bound = synthetic_upper_bound(budget).value
        assert bound >= max(fixed_route_value(budget, 1), fixed_route_value(budget, 2)) - 1e-7

    def test_fixed_routes_at_t_star(self):
        assert fixed_route_value(T_STAR, 1) == pytest.approx(normal_cdf((T_STAR - 106) / 2.0))
        assert fixed_route_value(T_STAR, 2) == pytest.approx(normal_cdf((T_STAR - 106) / math.sqrt(3.0)))

    def test_result_is_json_ready(self):
        doc = synthetic_upper_bound(T_STAR).to_dict()
        assert set(doc) == {"value", "method", "error_estimate", "config"}
        json.dumps(doc)

    def test_out_of_range_rejected(self):
        with pytest.raises(OracleError):
            OracleResult(1.2, "quadrature", 0.0, {})


class TestMonteCarlo:
    def test_agrees_with_quadrature(self):
        mc = oracle_policy_rollout_value(T_STAR, 1_000_000, seed=11)
        assert abs(mc.value - synthetic_upper_bound(T_STAR).value) < 4 * mc.error_estimate

    def test_single_draw(self):
        assert oracle_policy_rollout_value(T_STAR, 1, seed=3).value in (0.0, 1.0)

    def test_fixed_route_below_optimum(self):
        abce = oracle_policy_rollout_value(T_STAR, 200_000, seed=5, policy="ABCE")
        assert abs(abce.value - fixed_route_value(T_STAR, 1)) < 4 * abce.error_estimate
        assert abce.value < synthetic_upper_bound(T_STAR).value

    def test_validation(self):
        with pytest.raises(OracleError):
            oracle_policy_rollout_value(T_STAR, 0, seed=0)
        with pytest.raises(OracleError):
            oracle_policy_rollout_value(T_STAR, 10, seed=0, policy="ABXE")

    def test_floor_probability_is_negligible(self, synthetic):
        # Chance that any synthetic draw reaches the time floor: the smallest
        # mean-to-sd ratio is 5 (edge AB), so it is about Phi(-5) ~ 2.9e-7.
        sd = synthetic.std[~synthetic.deterministic_mask]
        mu = synthetic.mu[~synthetic.deterministic_mask]
        p = max(normal_cdf((TIME_FLOOR - m) / s) for m, s in zip(mu, sd))
        assert p < 3e-7


class TestExhaustive:
    def test_synthetic_matches_quadrature(self):
        res = exhaustive_policy_value(build_synthetic(), 0, 4, T_STAR, bins=64, num_samples=100_000, seed=0)
        assert abs(res.value - synthetic_upper_bound(T_STAR).value) < 0.01

    def test_deterministic_network(self):
        net = StochasticNetwork(4, [0, 0, 1, 2], [1, 2, 3, 3], [1.0, 2.0, 5.0, 1.0], np.zeros((4, 4)))
        assert exhaustive_policy_value(net, 0, 3, 3.0, num_samples=100).value == 1.0
        assert exhaustive_policy_value(net, 0, 3, 2.9, num_samples=100).value == 0.0

    def test_single_path_network(self):
        sigma = np.array([[1.0, 0.3], [0.3, 2.0]])
        net = StochasticNetwork(3, [0, 1], [1, 2], [4.0, 6.0], sigma)
        res = exhaustive_policy_value(net, 0, 2, 11.0, bins=8, num_samples=100_000, seed=2)
        exact = normal_cdf((11.0 - 10.0) / math.sqrt(1.0 + 2.0 + 0.6))
        assert abs(res.value - exact) < 4 * res.error_estimate

    def test_guards(self):
        big = StochasticNetwork(9, list(range(8)), list(range(1, 9)), [1.0] * 8, np.zeros((8, 8)))
        with pytest.raises(OracleError):
            exhaustive_policy_value(big, 0, 8, 10.0)
        with pytest.raises(OracleError, match="exceeds"):
            exhaustive_policy_value(build_synthetic(), 0, 4, T_STAR, bins=64, num_samples=10_000, max_entries=5)
