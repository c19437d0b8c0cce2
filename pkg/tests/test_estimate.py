import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import frozen
import oracles
from rsgf.estimate import (BinnedBaseline, ConstantBaseline, EstimateBundle, ZeroBaseline, episode_contributions,
                           estimate_bundle, estimate_gradient, estimate_value, is_weight, on_policy_mask,
                           stat_constants, tail_bound_gradient, tail_bound_value, trajectory_weights)
from rsgf.mdp import EpisodeBatch, default_tabular, rollout_batch
from builders import single_state

BEHAVIOR = np.array(frozen.TABULAR_BEHAVIOR_THETA)


def naive_estimates(batch, policy, gamma):
    """Weightless REINFORCE with rewards-to-go, one loop per episode and step."""
    n, q1, T1 = batch.rewards.shape
    values = np.zeros(q1)
    grads = np.zeros((q1, policy.dim))
    for k in range(n):
        for j in range(q1):
            sign = -1.0 if j == 0 else 1.0
            values[j] += sign * sum(gamma**t * batch.rewards[k, j, t] for t in range(T1))
            for t in range(T1):
                rtg = sum(gamma ** (u - t) * batch.rewards[k, j, u] for u in range(t, T1))
                score = policy.grad_log_prob(batch.actions[k, t], batch.states[k, t])
                grads[j] += sign * gamma**t * rtg * score
    return values / n, grads / n


class TestWeights:
    def test_on_policy_weight_is_one(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol, 20, seed=0)
        assert np.all(trajectory_weights(b, pol) == 1.0)
        assert np.all(on_policy_mask(b, pol))

    def test_clip_raw_weight(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol.with_theta(BEHAVIOR), 1, seed=0)
        lp_target = float(np.sum(pol.log_prob(b.actions[0], b.states[0, :-1])))
        b.log_prob[:] = lp_target - math.log(3.7)
        assert is_weight(b, pol) == pytest.approx(3.7, rel=1e-12)
        assert is_weight(b, pol, clip=(0.8, 1.2)) == 1.2

    def test_log_space_matches_naive_product(self):
        spec, pol = default_tabular(np.array(frozen.TABULAR_THETA), horizon=5)
        beh = pol.with_theta(BEHAVIOR)
        b = rollout_batch(spec, beh, 30, seed=4)
        w = trajectory_weights(b, pol)
        for k in range(len(b)):
            ratio = 1.0
            for t in range(spec.horizon + 1):
                s, a = b.states[k, t], b.actions[k, t]
                ratio *= pol.probs(s)[0, a] / beh.probs(s)[0, a]
            assert w[k] == pytest.approx(ratio, rel=1e-10)

    def test_non_finite_weight(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol.with_theta(BEHAVIOR), 2, seed=0)
        b.log_prob[:] = -1e4
        with pytest.raises(FloatingPointError):
            trajectory_weights(b, pol)

    def test_missing_snapshot_treated_off_policy(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol, 3, seed=0)
        b.behavior_thetas = [None] * 3
        assert not on_policy_mask(b, pol).any()
        np.testing.assert_allclose(trajectory_weights(b, pol), 1.0, rtol=1e-12)


class TestValue:
    def test_zero_rewards(self):
        spec, pol = single_state(reward=0.0)
        assert estimate_value(0, rollout_batch(spec, pol, 4, seed=0), pol, spec.gamma) == 0.0

    def test_constant_cost_one_episode(self):
        spec, pol = single_state(reward=0.0, cost=1.0, horizon=1, gamma=0.5)
        assert estimate_value(1, rollout_batch(spec, pol, 1, seed=0), pol, 0.5) == 1.5

    def test_empty_batch(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol, 2, seed=0).subset([])
        with pytest.raises(ValueError):
            estimate_value(0, b, pol, spec.gamma)

    def test_off_policy_unbiased(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol.with_theta(BEHAVIOR), 20000, seed=21)
        vals, _, _ = episode_contributions(b, pol, spec.gamma)
        for j in (0, 1):
            se = vals[:, j].std(ddof=1) / math.sqrt(len(b))
            assert abs(vals[:, j].mean() - frozen.TABULAR_V[j]) <= 4 * se


class TestGradient:
    def test_zero_rewards(self):
        spec, pol = single_state(reward=0.0)
        g = estimate_gradient(0, rollout_batch(spec, pol, 5, seed=0), pol, spec.gamma, ZeroBaseline())
        np.testing.assert_array_equal(g, 0.0)

    def test_unbiased(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol, 20000, seed=22)
        _, grads, _ = episode_contributions(b, pol, spec.gamma)
        for j in (0, 1):
            se = grads[:, j].std(axis=0, ddof=1) / math.sqrt(len(b))
            assert np.all(np.abs(grads[:, j].mean(axis=0) - frozen.TABULAR_GRAD[j]) <= 4 * se)

    def test_constant_baseline_invariance(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol, 20000, seed=23)
        _, g0, _ = episode_contributions(b, pol, spec.gamma)
        _, g3, _ = episode_contributions(b, pol, spec.gamma, baselines={0: ConstantBaseline(0.3),
                                                                      1: ConstantBaseline(0.3)})
        diff = g3 - g0
        se = diff.std(axis=0, ddof=1) / math.sqrt(len(b))
        assert np.all(np.abs(diff.mean(axis=0)) <= 4 * se)

    def test_baseline_over_bound(self, tabular):
        spec, pol = tabular
        bad = ConstantBaseline(0.3)
        bad.bound = 0.1
        with pytest.raises(ValueError, match="bound"):
            estimate_gradient(0, rollout_batch(spec, pol, 3, seed=0), pol, spec.gamma, bad)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_on_policy_matches_weightless_reference(self, seed):
        spec, pol = default_tabular(np.array([0.7, -1.1]), horizon=3)
        b = rollout_batch(spec, pol, 40, seed=seed)
        bundle = estimate_bundle(b, pol, spec.gamma)
        v, g = naive_estimates(b, pol, spec.gamma)
        assert bundle.objective_value == pytest.approx(v[0], abs=1e-12)
        np.testing.assert_allclose(bundle.values, v[1:], atol=1e-12)
        np.testing.assert_allclose(bundle.gradients, g, atol=1e-12)


class TestBundle:
    def test_counts(self, tabular):
        spec, pol = tabular
        b = EpisodeBatch.concatenate([rollout_batch(spec, pol, 5, seed=0),
                                      rollout_batch(spec, pol.with_theta(BEHAVIOR), 3, seed=1)])
        e = estimate_bundle(b, pol, spec.gamma)
        assert (e.batch_size, e.on_policy_count, e.off_policy_count) == (8, 5, 3)
        assert e.all_values.shape == (2,)

    def test_order_independent(self, tabular):
        spec, pol = tabular
        b = rollout_batch(spec, pol.with_theta(BEHAVIOR), 16, seed=0)
        e1 = estimate_bundle(b, pol, spec.gamma)
        e2 = estimate_bundle(b.subset(np.arange(16)), pol, spec.gamma)
        np.testing.assert_array_equal(e1.gradients, e2.gradients)

    def test_inconsistent_counts(self):
        with pytest.raises(ValueError):
            EstimateBundle(np.zeros(1), np.zeros((2, 2)), 0.0, batch_size=3, on_policy_count=1, off_policy_count=1)


class TestBinnedBaseline:
    def test_update_tracks_mean_reward_to_go(self):
        spec, pol = single_state(reward=1.0, horizon=2, gamma=0.5)
        bl = BinnedBaseline([-0.5], [0.5], 1, stream=0, gamma=0.5)
        b = rollout_batch(spec, pol, 3, seed=0)
        bl.update(b)
        # rewards-to-go 1.75, 1.5, 1 averaged over steps
        assert bl.table[0] == pytest.approx((1.75 + 1.5 + 1.0) / 3)
        assert bl.bound == pytest.approx(bl.table[0])
        np.testing.assert_allclose(bl(np.zeros((2, 1))), bl.table[0])


class TestConstants:
    def test_worked_values(self):
        c = stat_constants(1, 1.0, 0.0, 0.5, 2, 0.5, 1.0)
        assert c.phi_j == frozen.PHI and c.phi_bar_j == frozen.PHI_BAR
        assert c.psi_j == frozen.PSI and c.psi_bar_j == frozen.PSI_BAR

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 5), st.floats(0, 3), st.floats(0.05, 0.99), st.integers(0, 30), st.floats(0.05, 1),
           st.floats(0.1, 5))
    def test_against_loops(self, B, B_hat, gamma, T, nu, B_tilde):
        c = stat_constants(1, B, B_hat, gamma, T, nu, B_tilde)
        assert c.phi_j == pytest.approx(oracles.phi_loop(B, gamma, T), rel=1e-10)
        assert c.phi_bar_j == pytest.approx(oracles.phi_bar_loop(B, gamma, T, nu), rel=1e-10)
        assert c.psi_j == pytest.approx(oracles.psi_loop(B, B_hat, gamma, T, B_tilde), rel=1e-10)

    def test_proximity_constants(self):
        c = stat_constants(1, 1.0, 0.0, 0.5, 2, 0.5, 1.0, theta=[0.1, 0.2], behavior_thetas=[[0.1, 0.2], [0.1, 1.2]],
                           L_tilde=0.5)
        assert c.phi_tilde[0] == c.phi_j
        assert c.phi_tilde[1] == pytest.approx(c.phi_j * math.exp(3 * 0.5 * 1.0))

    @pytest.mark.parametrize("gamma,nu", [(1.0, 0.5), (0.0, 0.5), (0.5, 0.0), (0.5, 1.5)])
    def test_invalid(self, gamma, nu):
        with pytest.raises(ValueError):
            stat_constants(1, 1.0, 0.0, gamma, 2, nu, 1.0)

    def test_tiny_floor_gives_inf(self):
        assert stat_constants(1, 1.0, 0.0, 0.5, 400, 1e-3, 1.0).phi_bar_j == math.inf


class TestTailBounds:
    def test_worked_value(self):
        p = tail_bound_value(0.5, 100, 100, 0, 1.75, 14.0)
        assert p == pytest.approx(1 - 2 * math.exp(-2500 / 612.5), abs=1e-15)
        assert p == pytest.approx(0.9663, abs=1e-3)

    def test_clamps_at_zero(self):
        assert tail_bound_value(1e-9, 10, 10, 0, 1.75, 14.0) == 0.0
        assert tail_bound_gradient(1e-9, 10, 10, 0, 2.75, 22.0, 2) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 5), st.integers(1, 200), st.integers(0, 200), st.integers(1, 10))
    def test_in_unit_interval_and_monotone(self, eps, n_on, n_off, d):
        J = n_on + n_off
        p1 = tail_bound_gradient(eps, J, n_on, n_off, 2.75, 22.0, d)
        p2 = tail_bound_gradient(2 * eps, J, n_on, n_off, 2.75, 22.0, d)
        assert 0.0 <= p1 <= p2 <= 1.0
