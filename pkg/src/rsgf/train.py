"""Training loop: roll out, pick a replay batch, estimate, solve for a direction, step.

Every update writes one metrics row. Rows contain only quantities that are
deterministic functions of the config and seed, so reruns reproduce the
metrics file byte for byte; wall-clock times go to a separate file.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .certify import achieved_delta, bounding_lipschitz, iteration_bound, lipschitz_L_j, margin
from .estimate import BinnedBaseline, ZeroBaseline, estimate_bundle, stat_constants
from .flow import Schedule, max_stepsize
from .mdp import EpisodeBatch, rollout_batch
from .qcqp import Status, build_subproblem, solve

__all__ = [
    "TrainConfig",
    "ReplayBuffer",
    "TrainResult",
    "TrainingAborted",
    "select_replay",
    "train",
    "convergence_diagnostics",
    "read_metrics",
    "METRICS_SCHEMA",
]

log = logging.getLogger(__name__)

METRICS_SCHEMA = "rsgf-metrics/1"
REPLAY_RULES = ("current", "last_two", "all")


@dataclass
class TrainConfig:
    iterations: int = 100
    episodes_per_iteration: int = 30
    replay: str = "current"
    alpha: float = 1.0
    beta: float = 1.0
    schedule: str = "constant"
    h: float = 0.1
    h_c: float = 1.0
    h_r: float = 1.0
    bound_C: float = 100.0
    clip: list | None = None
    baseline: str = "zero"
    baseline_bins: int = 4
    delta: float = 0.1
    updates_per_iteration: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.bound_C > 0:
            raise ValueError("bound_C must be positive")
        if self.episodes_per_iteration < 1:
            raise ValueError("episodes_per_iteration must be at least 1")
        if self.updates_per_iteration < 1:
            raise ValueError("updates_per_iteration must be at least 1")
        if self.updates_per_iteration > self.episodes_per_iteration:
            raise ValueError("cannot split fewer episodes than updates per iteration")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.baseline not in ("zero", "binned"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.clip is not None:
            if len(self.clip) != 2 or not 0 <= self.clip[0] <= self.clip[1]:
                raise ValueError("clip must be [lo, hi] with 0 <= lo <= hi")
            self.clip = [float(self.clip[0]), float(self.clip[1])]
        replay_window(self.replay)
        self.stepsize_schedule()

    def stepsize_schedule(self) -> Schedule:
        return Schedule(self.schedule, h=self.h, c=self.h_c, r=self.h_r, alpha=self.alpha)


def replay_window(rule: str) -> int | None:
    """Number of most recent iterations a rule reads (None for all)."""
    if rule == "current":
        return 1
    if rule == "last_two":
        return 2
    if rule == "all":
        return None
    if rule.startswith("window:"):
        try:
            w = int(rule.split(":", 1)[1])
        except ValueError:
            w = 0
        if w >= 1:
            return w
    raise ValueError(f"unknown replay rule {rule!r}; use current, last_two, window:<w> or all")


class ReplayBuffer:
    """Episodes grouped by generating iteration, oldest evicted first."""

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self._batches: OrderedDict[int, EpisodeBatch] = OrderedDict()

    def add(self, iteration: int, batch: EpisodeBatch) -> None:
        if any(bt is None for bt in batch.behavior_thetas):
            raise ValueError("stored episodes need their behavior parameters")
        self._batches[int(iteration)] = batch
        while self.capacity is not None and len(self._batches) > self.capacity:
            self._batches.popitem(last=False)

    def iterations(self) -> list[int]:
        return list(self._batches)

    def get(self, iteration: int) -> EpisodeBatch:
        return self._batches[iteration]

    def __len__(self) -> int:
        return sum(len(b) for b in self._batches.values())


def select_replay(buffer: ReplayBuffer, iteration: int, rule: str) -> EpisodeBatch:
    """Episodes used at ``iteration``, oldest iteration first."""
    w = replay_window(rule)
    if iteration not in buffer.iterations():
        raise ValueError(f"no episodes from iteration {iteration} in the buffer")
    its = [i for i in buffer.iterations() if i <= iteration and (w is None or i > iteration - w)]
    batch = EpisodeBatch.concatenate([buffer.get(i) for i in its])
    if len(batch) == 0:
        raise ValueError("replay selection is empty")
    return batch


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    policy: object
    rows: list[dict]
    events: list[str] = field(default_factory=list)
    out_dir: Path | None = None


def _metric_columns(q: int) -> list[str]:
    cols = ["iteration", "update", "status", "v0_hat"]
    cols += [f"v{j}_hat" for j in range(1, q + 1)]
    cols += ["xi_norm"] + [f"u{j}" for j in range(1, q + 2)]
    cols += ["kkt_residual", "stepsize", "step_cap", "theta_norm_sq", "bound_C"]
    cols += [f"margin{j}" for j in range(1, q + 1)] + [f"confidence{j}" for j in range(1, q + 1)]
    cols += ["batch_size", "on_policy", "off_policy"]
    return cols


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class _MetricsWriter:
    def __init__(self, path: Path | None, columns: list[str]):
        self.columns = columns
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._fh.write(f"# schema: {METRICS_SCHEMA}\n")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(columns)

    def write(self, row: dict) -> None:
        if self._fh is not None:
            self._w.writerow([_fmt(row[c]) for c in self.columns])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _baselines(config: TrainConfig, env, n_streams: int):
    if config.baseline == "zero":
        return {j: ZeroBaseline() for j in range(n_streams)}
    low, high = getattr(env, "state_low", None), getattr(env, "state_high", None)
    if low is None:
        raise ValueError("binned baseline needs an environment with state_low/state_high")
    return {j: BinnedBaseline(low, high, config.baseline_bins, j, env.gamma) for j in range(n_streams)}


def _manifest(config: TrainConfig, env, policy, extra=None) -> dict:
    return {
        "format": "rsgf-run/1",
        "config": asdict(config),
        "seed": config.seed,
        "environment": {"class": type(env).__name__, "horizon": env.horizon, "gamma": env.gamma},
        "policy": {"class": type(policy).__name__, "dim": int(policy.dim)},
        "versions": {
            "rsgf": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        **(extra or {}),
    }


def train(config: TrainConfig, env, initial_policy, out_dir=None, manifest_extra=None) -> TrainResult:
    """Run the stochastic safe-gradient training loop.

    With ``out_dir`` the run writes ``manifest.json`` (first), ``metrics.csv``,
    ``timings.csv``, ``events.log`` and policy checkpoints under
    ``checkpoints/``.
    """
    policy = initial_policy.with_theta(np.asarray(initial_policy.theta, dtype=float).copy())
    theta = np.asarray(policy.theta, dtype=float)
    if theta @ theta > config.bound_C:
        raise ValueError("initial parameters violate the norm bound ||theta||^2 <= C")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(_manifest(config, env, policy, manifest_extra), indent=2) + "\n")

    q = env.n_constraints
    n_streams = q + 1
    schedule = config.stepsize_schedule()
    clip = tuple(config.clip) if config.clip is not None else None
    baselines = _baselines(config, env, n_streams)
    buffer = ReplayBuffer(replay_window(config.replay))
    writer = _MetricsWriter(out / "metrics.csv" if out else None, _metric_columns(q))
    timings = open(out / "timings.csv", "w") if out else None
    if timings:
        timings.write("iteration,seconds\n")
    events: list[str] = []
    rows: list[dict] = []

    bounds = policy.lipschitz_bounds()
    log_nu = policy.log_nu
    nu = math.exp(log_nu) if log_nu > -700 else 0.0
    L = [lipschitz_L_j(env.reward_bounds[j], bounds.score_lipschitz, bounds.score_bound, env.gamma, env.horizon)
         for j in range(1, n_streams)]
    L_bound = bounding_lipschitz(config.bound_C)

    def event(msg):
        events.append(msg)
        log.warning(msg)

    def checkpoint(name):
        if out is not None:
            policy.save(out / "checkpoints" / name)

    try:
        for i in range(1, config.iterations + 1):
            t0 = time.perf_counter()
            batch = rollout_batch(env, policy, config.episodes_per_iteration, config.seed, iteration=i)
            buffer.add(i, batch)
            J = select_replay(buffer, i, config.replay)
            parts = np.array_split(np.arange(len(J)), config.updates_per_iteration)
            for k, idx in enumerate(parts, start=1):
                mb = J if config.updates_per_iteration == 1 else J.subset(idx)
                try:
                    est = estimate_bundle(mb, policy, env.gamma, baselines=baselines, clip=clip)
                except FloatingPointError as exc:
                    checkpoint("abort.json")
                    raise TrainingAborted(f"iteration {i}: {exc}") from exc
                if not (np.all(np.isfinite(est.gradients)) and np.all(np.isfinite(est.all_values))):
                    checkpoint("abort.json")
                    raise TrainingAborted(f"iteration {i}: non-finite estimate")
                theta = np.asarray(policy.theta, dtype=float)
                sub = build_subproblem(theta, est, config.alpha, config.beta, config.bound_C)
                sol = solve(sub)
                row = {
                    "iteration": i, "update": k, "status": sol.status.value,
                    "v0_hat": est.objective_value,
                    "batch_size": est.batch_size, "on_policy": est.on_policy_count,
                    "off_policy": est.off_policy_count, "bound_C": config.bound_C,
                }
                for j in range(1, n_streams):
                    row[f"v{j}_hat"] = est.values[j - 1]
                cap = max_stepsize(config.alpha, config.beta, L + [L_bound])
                row["step_cap"] = cap
                if sol.status is Status.INFEASIBLE:
                    event(f"iteration {i} update {k}: subproblem infeasible; parameters frozen")
                    h, xi_norm = 0.0, float("nan")
                    row.update({"xi_norm": xi_norm, "kkt_residual": float("nan")})
                    for j in range(1, q + 2):
                        row[f"u{j}"] = float("nan")
                    for j in range(1, n_streams):
                        row[f"margin{j}"] = float("nan")
                        row[f"confidence{j}"] = 0.0
                else:
                    xi = sol.xi
                    xi_norm = float(np.linalg.norm(xi))
                    h = schedule(i, xi_norm)
                    new_theta = theta + h * xi
                    if not np.all(np.isfinite(new_theta)):
                        checkpoint("abort.json")
                        raise TrainingAborted(f"iteration {i}: non-finite parameters")
                    row.update({"xi_norm": xi_norm, "kkt_residual": sol.kkt_residual})
                    for j in range(1, q + 2):
                        row[f"u{j}"] = sol.multipliers[j - 1]
                    for j in range(1, n_streams):
                        M = margin(est.values[j - 1], config.alpha, h, config.beta, L[j - 1], xi_norm)
                        sc = stat_constants(j, env.reward_bounds[j], baselines[j].bound, env.gamma, env.horizon,
                                            nu if nu > 0 else 1e-300, bounds.score_bound)
                        dlt = achieved_delta(M, est.batch_size, est.on_policy_count, est.off_policy_count,
                                             sc.phi_j, sc.phi_bar_j, sc.psi_j, sc.psi_bar_j, policy.dim)
                        row[f"margin{j}"] = M
                        # clipped weights void the guarantees, so clipped runs never certify
                        certified = M > 0 and h < cap and clip is None
                        row[f"confidence{j}"] = max(0.0, 1.0 - 2.0 * dlt) if certified else 0.0
                    policy = policy.with_theta(new_theta)
                row["stepsize"] = h
                th = np.asarray(policy.theta, dtype=float)
                row["theta_norm_sq"] = float(th @ th)
                rows.append(row)
                writer.write(row)
            if config.baseline == "binned":
                for b in baselines.values():
                    b.update(batch)
            if config.checkpoint_every and i % config.checkpoint_every == 0:
                checkpoint(f"iter_{i:05d}.json")
            if timings:
                timings.write(f"{i},{time.perf_counter() - t0:.6f}\n")
        checkpoint("final.json")
    finally:
        writer.close()
        if timings:
            timings.close()
        if out is not None:
            (out / "events.log").write_text("".join(e + "\n" for e in events))
    return TrainResult(policy, rows, events, out)


def read_metrics(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    out = []
    for r in reader:
        row = {}
        for k, v in r.items():
            if k == "status":
                row[k] = v
            else:
                try:
                    row[k] = int(v)
                except ValueError:
                    row[k] = float(v)
        out.append(row)
    return out


def convergence_diagnostics(trace, schedule: str | Schedule | None = None, kappa=None, epsilon=None, ell_hat=None,
                            sigma_bar=None, epsilon_star=None) -> dict:
    """Summaries that speak to the convergence hypotheses of a finished run.

    ``trace`` is a list of metric rows (or a :class:`TrainResult`).
    """
    rows = trace.rows if isinstance(trace, TrainResult) else list(trace)
    xi_sq = np.array([r["xi_norm"] ** 2 for r in rows if np.isfinite(r["xi_norm"])])
    running_min = np.minimum.accumulate(xi_sq) if xi_sq.size else xi_sq
    steps = np.array([r["stepsize"] for r in rows])
    kind = schedule.kind if isinstance(schedule, Schedule) else schedule
    if kind is None:
        vanishing = steps.size > 1 and steps[-1] < steps[0] and np.all(np.diff(steps[steps > 0]) <= 0)
    else:
        vanishing = kind in ("inverse_sqrt", "harmonic")
    flags = []
    if not vanishing:
        flags.append("step sizes do not vanish")
    sizes = np.array([r["batch_size"] for r in rows])
    growing = bool(sizes.size > 1 and np.all(np.diff(sizes) >= 0) and sizes[-1] > sizes[0])
    if not growing:
        flags.append("batch size does not grow with the iteration count")
    report = {
        "running_min_xi_sq": running_min.tolist(),
        "final_min_xi_sq": float(running_min[-1]) if running_min.size else float("nan"),
        "schedule_ok": bool(vanishing),
        "batch_growth_ok": growing,
        "flags": flags,
        "iteration_bound": None,
    }
    if None not in (kappa, epsilon, ell_hat, sigma_bar, epsilon_star):
        q = sum(1 for k in rows[0] if k.startswith("margin")) if rows else 0
        try:
            report["iteration_bound"] = iteration_bound(kappa, epsilon, ell_hat, sigma_bar, q, epsilon_star)
        except ValueError as exc:
            report["flags"].append(str(exc))
    return report
