import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rsgf.estimate import EstimateBundle
from rsgf.qcqp import (QcqpProblem, QcqpSolution, Status, build_subproblem, closed_form_direction,
                       constraint_values, kkt_residual, make_beta, slater_probe, solve)


def _bundle(values, gradients):
    gradients = np.atleast_2d(np.asarray(gradients, dtype=float))
    return EstimateBundle(values=np.asarray(values, dtype=float), gradients=gradients, objective_value=0.0,
                          batch_size=1, on_policy_count=1, off_policy_count=0)


class TestBuildSubproblem:
    def test_origin(self):
        p = build_subproblem(np.zeros(2), _bundle([-1.0], [[1, 0], [0, 1]]), alpha=1.0, beta_fn=1.0, bound_C=4.0)
        np.testing.assert_array_equal(p.g0, [1, 0])
        np.testing.assert_array_equal(p.levels, [-1, -4])
        np.testing.assert_array_equal(p.gradients, [[0, 1], [0, 0]])
        assert p.beta == 1.0

    def test_on_the_ball_boundary(self):
        p = build_subproblem(np.array([2.0, 0.0]), _bundle([-1.0], [[1, 0], [0, 1]]), 1.0, 1.0, 4.0)
        assert p.levels[-1] == 0.0
        np.testing.assert_array_equal(p.gradients[-1], [4, 0])

    def test_alpha_scales_levels(self):
        p = build_subproblem(np.array([1.0, 0.0]), _bundle([-0.5], [[1, 0], [0, 1]]), 3.0, 1.0, 4.0)
        np.testing.assert_allclose(p.levels, [-1.5, -9.0])

    def test_callable_beta(self):
        p = build_subproblem(np.array([1.0, 1.0]), _bundle([-1.0], [[1, 0], [0, 1]]), 1.0, lambda th: 1 + th @ th, 4.0)
        assert p.beta == 3.0

    def test_wrong_gradient_length(self):
        with pytest.raises(ValueError, match="dimension"):
            build_subproblem(np.zeros(3), _bundle([-1.0], [[1, 0], [0, 1]]), 1.0, 1.0, 4.0)

    @pytest.mark.parametrize("alpha,C", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
    def test_bad_parameters(self, alpha, C):
        with pytest.raises(ValueError):
            build_subproblem(np.zeros(2), _bundle([-1.0], [[1, 0], [0, 1]]), alpha, 1.0, C)


class TestSolve:
    def test_inactive_constraint(self):
        sol = solve(QcqpProblem.from_pairs([1.0, 0.0], [(-10.0, [0.0, 1.0])], 1.0))
        assert sol.status is Status.OPTIMAL
        np.testing.assert_allclose(sol.xi, [-1.0, 0.0], atol=1e-10)
        np.testing.assert_allclose(sol.multipliers, [0.0], atol=1e-10)

    def test_hand_projection(self):
        sol = solve(QcqpProblem.from_pairs([-2.0, 0.0], [(0.0, [1.0, 0.0])], 1.0))
        assert sol.optimal
        np.testing.assert_allclose(sol.xi, [0.0, 0.0], atol=1e-8)
        np.testing.assert_allclose(sol.multipliers, [2.0], atol=1e-7)
        assert sol.active_set == (0,)

    def test_hand_projection_matches_ball_oracle(self):
        val, xi = oracles.grid_qcqp([-2.0, 0.0], [0.0], [[1.0, 0.0]], 1.0)
        sol = solve(QcqpProblem.from_pairs([-2.0, 0.0], [(0.0, [1.0, 0.0])], 1.0))
        assert sol.xi is not None
        assert abs(0.5 * np.sum((sol.xi + [-2.0, 0.0]) ** 2) - val) <= 1e-6

    def test_infeasible(self):
        p = QcqpProblem.from_pairs([1.0, 1.0], [(10.0, [0.0, 0.0]), (-1.0, [1.0, 0.0])], 1.0)
        sol = solve(p)
        assert sol.status is Status.INFEASIBLE
        assert sol.xi is None

    def test_disjoint_balls_infeasible(self):
        # balls of radius ~1 centered at (+-3, 0)
        p = QcqpProblem.from_pairs([0.0, 0.0], [(4.0, [-3.0, 0.0]), (4.0, [3.0, 0.0])], 1.0)
        assert solve(p).status is Status.INFEASIBLE

    def test_no_constraints(self):
        sol = solve(QcqpProblem([2.0, -1.0], np.zeros(0), np.zeros((0, 2)), 1.0))
        np.testing.assert_array_equal(sol.xi, [-2.0, 1.0])

    def test_warm_start_same_answer(self):
        p = QcqpProblem.from_pairs([1.0, 2.0], [(-0.1, [1.0, 0.5]), (-0.2, [0.0, 1.0])], 0.7)
        cold = solve(p)
        warm = solve(p, u0=cold.multipliers * 1.3)
        np.testing.assert_allclose(warm.xi, cold.xi, atol=1e-8)

    def test_warm_start_wrong_shape_ignored(self):
        p = QcqpProblem.from_pairs([1.0, 2.0], [(-0.1, [1.0, 0.5])], 0.7)
        np.testing.assert_allclose(solve(p, u0=np.ones(5)).xi, solve(p).xi)

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            QcqpProblem.from_pairs([1.0], [(-1.0, [1.0])], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            QcqpProblem([1.0, 0.0], [-1.0], [[1.0, 0.0, 0.0]], 1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_grid_oracle(self, seed):
        r = np.random.default_rng(seed)
        g0 = r.normal(size=2) * 2
        grads = r.normal(size=(2, 2))
        levels = -r.random(2)
        beta = float(np.exp(r.uniform(np.log(0.1), np.log(10))))
        sol = solve(QcqpProblem(g0, levels, grads, beta))
        val, _ = oracles.grid_qcqp(g0, levels, grads, beta)
        assert sol.optimal
        assert abs(0.5 * np.sum((sol.xi + g0) ** 2) - val) <= 1e-4


problems = st.builds(
    lambda g0, G, a, b: QcqpProblem(np.array(g0), np.array(a), np.array(G).reshape(len(a), 2), b),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-3, -0.01), min_size=2, max_size=2),
    st.floats(0.1, 10),
)


class TestSolveProperties:
    @settings(max_examples=200, deadline=None)
    @given(problems)
    def test_kkt_when_zero_is_strictly_feasible(self, p):
        sol = solve(p)
        assert sol.optimal
        assert sol.kkt_residual <= 1e-8
        assert np.all(sol.multipliers >= 0)
        assert np.all(constraint_values(p, sol.xi) <= 1e-8)

    @settings(max_examples=200, deadline=None)
    @given(problems)
    def test_closed_form_consistency(self, p):
        sol = solve(p)
        np.testing.assert_allclose(closed_form_direction(p.g0, p.gradients, sol.multipliers, p.beta), sol.xi,
                                   atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(problems)
    def test_no_better_feasible_point_nearby(self, p):
        sol = solve(p)
        r = np.random.default_rng(0)
        cand = sol.xi + 1e-3 * r.normal(size=(200, 2))
        c = p.levels[None, :] + cand @ p.gradients.T + 0.5 * p.beta * np.sum(cand**2, axis=1)[:, None]
        feas = np.all(c <= 0, axis=1)
        obj = 0.5 * np.sum((cand + p.g0) ** 2, axis=1)
        assert np.all(obj[feas] >= p.objective(sol.xi) - 1e-9)


class TestClosedForm:
    def test_zero_multipliers(self):
        np.testing.assert_array_equal(closed_form_direction([1.0, -2.0], [[1.0, 1.0]], [0.0], 1.0), [-1.0, 2.0])

    def test_projection_example(self):
        np.testing.assert_allclose(closed_form_direction([-2.0, 0.0], [[1.0, 0.0]], [2.0], 1.0), [0.0, 0.0])

    def test_arithmetic_example(self):
        np.testing.assert_allclose(closed_form_direction([1.0, 1.0], [[1.0, 1.0]], [1.0], 1.0), [-1.0, -1.0])

    def test_empty(self):
        np.testing.assert_array_equal(closed_form_direction([3.0, 4.0], np.zeros((0, 2)), [], 1.0), [-3.0, -4.0])


class TestKktResidual:
    def _sol(self, xi, u):
        return QcqpSolution(Status.OPTIMAL, np.asarray(xi, dtype=float), np.asarray(u, dtype=float), 0.0)

    def test_unconstrained_example(self):
        p = QcqpProblem.from_pairs([1.0, 0.0], [(-10.0, [0.0, 1.0])], 1.0)
        assert kkt_residual(p, self._sol([-1.0, 0.0], [0.0])) == pytest.approx(0.0, abs=1e-15)

    def test_projection_example(self):
        p = QcqpProblem.from_pairs([-2.0, 0.0], [(0.0, [1.0, 0.0])], 1.0)
        assert kkt_residual(p, self._sol([0.0, 0.0], [2.0])) == pytest.approx(0.0, abs=1e-15)

    def test_perturbed(self):
        p = QcqpProblem.from_pairs([-2.0, 0.0], [(0.0, [1.0, 0.0])], 1.0)
        assert kkt_residual(p, self._sol([0.1, 0.0], [2.0])) >= 0.1

    def test_missing_direction(self):
        p = QcqpProblem.from_pairs([-2.0, 0.0], [(0.0, [1.0, 0.0])], 1.0)
        assert kkt_residual(p, QcqpSolution(Status.INFEASIBLE, None, np.zeros(1), np.inf)) == np.inf


class TestSlater:
    def test_all_negative_levels(self):
        res = slater_probe(QcqpProblem.from_pairs([0.0, 0.0], [(-1.0, [1.0, 0.0]), (-2.0, [0.0, 1.0])], 1.0))
        assert res.strictly_feasible
        np.testing.assert_array_equal(res.witness, [0.0, 0.0])

    def test_no_witness_for_large_beta(self):
        # 1 - t + t^2 / 2 has minimum 1/2 > 0
        res = slater_probe(QcqpProblem.from_pairs([0.0, 0.0], [(1.0, [-1.0, 0.0])], 1.0))
        assert not res.strictly_feasible

    def test_witness_for_small_beta(self):
        p = QcqpProblem.from_pairs([0.0, 0.0], [(1.0, [-1.0, 0.0])], 0.1)
        res = slater_probe(p)
        assert res.strictly_feasible
        assert np.all(constraint_values(p, res.witness) < 0)


class TestMakeBeta:
    def test_constant(self):
        assert make_beta(2.0)(np.zeros(3)) == 2.0

    def test_callable_passthrough(self):
        f = lambda th: 1.0 + th[0]  # noqa: E731
        assert make_beta(f) is f

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive(self, bad):
        with pytest.raises(ValueError):
            make_beta(bad)
