import json
import math

import numpy as np
import pytest

from builders import rewarded_action_chain, single_state
from rsgf.mdp import Cmdp, rollout_batch
from rsgf.policy import RbfGaussianPolicy
from rsgf.train import (METRICS_SCHEMA, ReplayBuffer, TrainConfig, TrainingAborted, convergence_diagnostics,
                        read_metrics, select_replay, train)


class LineEnv(Cmdp):
    """Point on [-1, 1] moved by the action; rewards are a fixed pair each step."""

    def __init__(self, rewards=(0.0, 0.0), horizon=4, gamma=0.9):
        self.rewards = np.asarray(rewards, dtype=float)
        self.horizon = horizon
        self.gamma = gamma
        self.reward_bounds = np.array([1.0, 1.0])
        self.reset_noise_dim = 1
        self.step_noise_dim = 0
        self.state_low = (-1.0,)
        self.state_high = (1.0,)

    def reset_from_uniform(self, u):
        return 2.0 * np.asarray(u).reshape(-1, 1) - 1.0

    def step_from_uniform(self, s, a, u):
        s2 = np.clip(s + 0.1 * a, -1.0, 1.0)
        return s2, np.tile(self.rewards, (len(s), 1)), np.zeros(len(s), dtype=bool)


def line_policy(theta=(0.0, 0.0)):
    return RbfGaussianPolicy([[-0.5], [0.5]], 0.5, 0.5, [-1.0], [1.0], theta=list(theta))


def _buffer(n_iters=3, n=4):
    spec, pol = rewarded_action_chain()
    buf = ReplayBuffer()
    for i in range(1, n_iters + 1):
        buf.add(i, rollout_batch(spec, pol, n, seed=0, iteration=i))
    return buf


class TestReplay:
    def test_current(self):
        b = select_replay(_buffer(), 3, "current")
        assert len(b) == 4

    def test_last_two_table_size(self):
        spec, pol = rewarded_action_chain()
        buf = ReplayBuffer(2)
        for i in (1, 2, 3):
            buf.add(i, rollout_batch(spec, pol, 100, seed=0, iteration=i))
        assert len(select_replay(buf, 3, "last_two")) == 200
        assert buf.iterations() == [2, 3]

    def test_window_one_equals_current(self):
        buf = _buffer()
        a, b = select_replay(buf, 3, "window:1"), select_replay(buf, 3, "current")
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_all_and_order(self):
        b = select_replay(_buffer(), 3, "all")
        assert len(b) == 12
        assert [int(x) for x in b.iterations[::4]] == [1, 2, 3]

    def test_missing_current(self):
        with pytest.raises(ValueError, match="iteration 5"):
            select_replay(_buffer(), 5, "current")

    @pytest.mark.parametrize("rule", ["window:0", "window:x", "recent"])
    def test_unknown_rule(self, rule):
        with pytest.raises(ValueError, match="replay rule"):
            select_replay(_buffer(), 3, rule)

    def test_fifo_eviction(self):
        spec, pol = rewarded_action_chain()
        buf = ReplayBuffer(capacity=2)
        for i in range(1, 6):
            buf.add(i, rollout_batch(spec, pol, 1, seed=0, iteration=i))
        assert buf.iterations() == [4, 5] and len(buf) == 2

    def test_snapshot_required(self):
        spec, pol = rewarded_action_chain()
        b = rollout_batch(spec, pol, 2, seed=0)
        b.behavior_thetas = [None, None]
        with pytest.raises(ValueError, match="behavior"):
            ReplayBuffer().add(1, b)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(bound_C=-1.0), dict(episodes_per_iteration=0),
                                    dict(delta=1.0), dict(baseline="nn"), dict(clip=[1.2, 0.8]),
                                    dict(replay="nope"), dict(schedule="cosine"),
                                    dict(updates_per_iteration=5, episodes_per_iteration=3)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_reward_env_does_not_move(self):
        env = LineEnv()
        pol = line_policy((0.2, -0.1))
        res = train(TrainConfig(iterations=10, episodes_per_iteration=8, h=0.1, bound_C=4.0), env, pol)
        assert np.linalg.norm(res.policy.theta - pol.theta) <= 1e-12
        assert all(r["xi_norm"] <= 1e-12 for r in res.rows)

    def test_infeasible_subproblem_freezes(self):
        spec, pol = single_state(cost=1.0)
        res = train(TrainConfig(iterations=3, episodes_per_iteration=4), spec, pol)
        assert [r["status"] for r in res.rows] == ["infeasible"] * 3
        assert all(r["stepsize"] == 0.0 for r in res.rows)
        assert len(res.events) == 3 and "frozen" in res.events[0]
        np.testing.assert_array_equal(res.policy.theta, pol.theta)

    def test_nan_aborts_with_checkpoint(self, tmp_path):
        env = LineEnv(rewards=(np.nan, 0.0))
        with pytest.raises(TrainingAborted, match="iteration 1"):
            train(TrainConfig(iterations=3, episodes_per_iteration=4), env, line_policy(), out_dir=tmp_path)
        assert (tmp_path / "checkpoints" / "abort.json").exists()

    def test_norm_bound_holds(self):
        spec, pol = rewarded_action_chain(cost=-0.1)
        res = train(TrainConfig(iterations=40, episodes_per_iteration=20, bound_C=0.05, h=0.5), spec, pol)
        norms = [r["theta_norm_sq"] for r in res.rows]
        assert max(norms) - 0.05 <= 1e-9
        assert norms[-1] > 0.04  # the objective pushes against the ball

    def test_initial_point_outside_ball(self):
        spec, pol = rewarded_action_chain()
        with pytest.raises(ValueError, match="norm bound"):
            train(TrainConfig(bound_C=0.01), spec, pol.with_theta([1.0, 0.0]))

    def test_objective_improves(self):
        spec, pol = rewarded_action_chain(cost=-0.1)
        res = train(TrainConfig(iterations=30, episodes_per_iteration=50, bound_C=25.0, h=0.5), spec, pol)
        first = np.mean([r["v0_hat"] for r in res.rows[:5]])
        last = np.mean([r["v0_hat"] for r in res.rows[-5:]])
        assert last < first

    def test_minibatch_splits(self):
        spec, pol = rewarded_action_chain()
        res = train(TrainConfig(iterations=2, episodes_per_iteration=10, updates_per_iteration=2), spec, pol)
        assert [(r["iteration"], r["update"], r["batch_size"]) for r in res.rows] == [
            (1, 1, 5), (1, 2, 5), (2, 1, 5), (2, 2, 5)]

    def test_last_two_mixes_policies(self):
        spec, pol = rewarded_action_chain()
        res = train(TrainConfig(iterations=3, episodes_per_iteration=10, replay="last_two", h=0.5), spec, pol)
        assert [r["batch_size"] for r in res.rows] == [10, 20, 20]
        assert res.rows[1]["off_policy"] == 10 and res.rows[1]["on_policy"] == 10

    def test_clipped_runs_never_certify(self):
        spec, pol = rewarded_action_chain(cost=-0.5)
        cfg = dict(iterations=3, episodes_per_iteration=200, h=1e-3, bound_C=25.0)
        plain = train(TrainConfig(**cfg), spec, pol).rows
        clipped = train(TrainConfig(**cfg, clip=[0.8, 1.2]), spec, pol).rows
        assert any(r["confidence1"] > 0 for r in plain)
        assert all(r["confidence1"] == 0.0 for r in clipped)

    def test_binned_baseline_runs(self):
        env = LineEnv(rewards=(0.5, -0.5))
        res = train(TrainConfig(iterations=3, episodes_per_iteration=6, baseline="binned", bound_C=4.0), env,
                    line_policy())
        assert len(res.rows) == 3


class TestArtifacts:
    def _run(self, out):
        spec, pol = rewarded_action_chain(cost=-0.1)
        cfg = TrainConfig(iterations=5, episodes_per_iteration=10, replay="last_two", h=0.3, seed=7,
                          checkpoint_every=2)
        return train(cfg, spec, pol, out_dir=out, manifest_extra={"experiment": "unit"})

    def test_metrics_byte_identical(self, tmp_path):
        self._run(tmp_path / "a")
        self._run(tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_files_and_schema(self, tmp_path):
        res = self._run(tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == f"# schema: {METRICS_SCHEMA}"
        assert lines[1].startswith("iteration,update,status,v0_hat,v1_hat,xi_norm,u1,u2,kkt_residual")
        assert len(lines) == 2 + 5
        back = read_metrics(tmp_path / "metrics.csv")
        assert back[3]["v0_hat"] == res.rows[3]["v0_hat"]
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["final.json", "iter_00002.json", "iter_00004.json"]
        assert (tmp_path / "timings.csv").read_text().startswith("iteration,seconds\n")

    def test_manifest(self, tmp_path):
        self._run(tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["seed"] == 7 and m["experiment"] == "unit" and m["config"]["replay"] == "last_two"
        assert set(m["versions"]) == {"rsgf", "python", "numpy", "scipy"}

    def test_manifest_written_before_metrics(self, tmp_path):
        env = LineEnv(rewards=(np.nan, 0.0))
        with pytest.raises(TrainingAborted):
            train(TrainConfig(iterations=1, episodes_per_iteration=2), env, line_policy(), out_dir=tmp_path)
        assert (tmp_path / "manifest.json").exists()


class TestDiagnostics:
    def test_constant_schedule_flag(self):
        spec, pol = rewarded_action_chain()
        res = train(TrainConfig(iterations=4, episodes_per_iteration=5), spec, pol)
        rep = convergence_diagnostics(res, "constant")
        assert not rep["schedule_ok"]
        assert "step sizes do not vanish" in rep["flags"]

    def test_inverse_sqrt_passes(self):
        spec, pol = rewarded_action_chain()
        res = train(TrainConfig(iterations=4, episodes_per_iteration=5, schedule="inverse_sqrt"), spec, pol)
        assert convergence_diagnostics(res, "inverse_sqrt")["schedule_ok"]
        assert convergence_diagnostics(res.rows)["schedule_ok"]

    def test_running_min_nonincreasing(self):
        rows = [{"xi_norm": x, "stepsize": 0.1, "batch_size": 5} for x in (3.0, 1.0, 2.0, 0.5, 4.0)]
        rm = convergence_diagnostics(rows)["running_min_xi_sq"]
        assert rm == [9.0, 1.0, 1.0, 0.25, 0.25]
        assert np.all(np.diff(rm) <= 0)

    def test_batch_growth(self):
        rows = [{"xi_norm": 1.0, "stepsize": 0.1, "batch_size": n} for n in (10, 20, 40)]
        assert convergence_diagnostics(rows)["batch_growth_ok"]

    def test_iteration_bound_reported(self):
        rows = [{"xi_norm": 1.0, "stepsize": 0.1, "batch_size": 5, "margin1": 0.1}]
        rep = convergence_diagnostics(rows, kappa=1.0, epsilon=0.1, ell_hat=0.0, sigma_bar=0.0, epsilon_star=1.0)
        assert rep["iteration_bound"] == pytest.approx(100.0)
        rep = convergence_diagnostics(rows, kappa=1.0, epsilon=0.1, ell_hat=1.0, sigma_bar=1.0, epsilon_star=1.0)
        assert rep["iteration_bound"] is None and any("variance" in f for f in rep["flags"])

    def test_nan_directions_skipped(self):
        rows = [{"xi_norm": math.nan, "stepsize": 0.0, "batch_size": 5}, {"xi_norm": 2.0, "stepsize": 0.1,
                                                                         "batch_size": 5}]
        assert convergence_diagnostics(rows)["final_min_xi_sq"] == 4.0
