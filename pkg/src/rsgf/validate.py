"""Estimator checks against the exact tabular oracle.

Each check returns a :class:`CheckResult`; clipped runs skip the checks
whose guarantees assume unclipped weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimate import episode_contributions, stat_constants, tail_bound_gradient, tail_bound_value
from .mdp import EpisodeBatch, default_tabular, oracle_gradient, oracle_value, rollout_batch

__all__ = ["CheckResult", "sample_batches", "validate_estimators", "MODES"]

MODES = ("on", "off", "mixed")
PASS, FAIL, SKIPPED = "PASS", "FAIL", "SKIPPED"


@dataclass
class CheckResult:
    name: str
    status: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.status:7s} {self.name}" + (f"  ({self.detail})" if self.detail else "")


def sample_batches(spec, target, behavior, mode: str, n_batches: int, batch_size: int, seed: int, clip=None):
    """Per-batch value and gradient estimates, shapes ``(B, q+1)`` and ``(B, q+1, d)``.

    ``mixed`` batches take their first half from the target policy and the
    rest from the behavior policy.
    """
    n = n_batches * batch_size
    if mode == "on":
        batch = rollout_batch(spec, target, n, seed, iteration=0)
    elif mode == "off":
        batch = rollout_batch(spec, behavior, n, seed, iteration=1)
    elif mode == "mixed":
        if batch_size < 2:
            raise ValueError("mixed batches need batch_size >= 2")
        k_on = batch_size // 2
        on = rollout_batch(spec, target, n_batches * k_on, seed, iteration=2)
        off = rollout_batch(spec, behavior, n_batches * (batch_size - k_on), seed, iteration=3)
        order = np.empty(n, dtype=int)
        pos = np.arange(n).reshape(n_batches, batch_size)
        order[pos[:, :k_on].ravel()] = np.arange(n_batches * k_on)
        order[pos[:, k_on:].ravel()] = n_batches * k_on + np.arange(n_batches * (batch_size - k_on))
        batch = EpisodeBatch.concatenate([on, off]).subset(order)
    else:
        raise ValueError(f"unknown batch mode {mode!r}")
    vals, grads, on_mask = episode_contributions(batch, target, spec.gamma, clip=clip)
    vals = vals.reshape(n_batches, batch_size, -1).mean(axis=1)
    grads = grads.reshape(n_batches, batch_size, *grads.shape[1:]).mean(axis=1)
    n_on = on_mask.reshape(n_batches, batch_size).sum(axis=1)
    return vals, grads, n_on


def _within(mean, se, truth, k=4.0):
    dev = np.abs(mean - truth)
    ok = bool(np.all(dev <= k * se))
    return ok, float(np.max(dev / np.maximum(se, 1e-300)))


def validate_estimators(n_batches=20000, batch_size=2, theta=(0.3, -0.2), behavior_theta=(0.0, 0.1), clip=None,
                        epsilons=(0.1, 0.5, 1.0), horizon=2, gamma=0.9, seed=0, tail_trials=10000,
                        tail_batch_size=50) -> list[CheckResult]:
    spec, target = default_tabular(np.asarray(theta, dtype=float), horizon=horizon, gamma=gamma)
    behavior = target.with_theta(np.asarray(behavior_theta, dtype=float))
    q1 = spec.n_rewards
    d = target.dim
    V = np.array([oracle_value(spec, target, j) for j in range(q1)])
    G = np.array([oracle_gradient(spec, target, j) for j in range(q1)])
    bounds = target.lipschitz_bounds()
    nu_floor = min(np.exp(target.log_nu), np.exp(behavior.log_nu))
    consts = [stat_constants(j, spec.reward_bounds[j], 0.0, gamma, horizon, nu_floor, bounds.score_bound)
              for j in range(q1)]
    # clipping keeps weights within [clip_lo, clip_hi]; bounds survive while clip_hi stays under 1 / nu^(T+1)
    weight_cap = consts[0].phi_bar_j / consts[0].phi_j
    out: list[CheckResult] = []
    for mode in MODES:
        vals, grads, n_on = sample_batches(spec, target, behavior, mode, n_batches, batch_size, seed, clip)
        J = batch_size
        # uniform bounds hold for every individual estimate
        ok_b = True
        for j, c in enumerate(consts):
            cap_v = (n_on * c.phi_j + (J - n_on) * c.phi_bar_j) / J
            cap_g = (n_on * c.psi_j + (J - n_on) * c.psi_bar_j) / J
            ok_b &= bool(np.all(np.abs(vals[:, j]) <= cap_v * (1 + 1e-12)))
            ok_b &= bool(np.all(np.abs(grads[:, j, :]) <= cap_g[:, None] * (1 + 1e-12)))
        if clip is not None and clip[1] > weight_cap:
            out.append(CheckResult(f"uniform bounds [{mode}]", SKIPPED, "clip ceiling exceeds the weight bound"))
        else:
            out.append(CheckResult(f"uniform bounds [{mode}]", PASS if ok_b else FAIL))
        for j in range(q1):
            name_v = f"value unbiased j={j} [{mode}]"
            name_g = f"gradient unbiased j={j} [{mode}]"
            if clip is not None:
                out.append(CheckResult(name_v, SKIPPED, "clipped weights are biased by design"))
                out.append(CheckResult(name_g, SKIPPED, "clipped weights are biased by design"))
                continue
            se = vals[:, j].std(ddof=1) / np.sqrt(n_batches)
            ok, z = _within(vals[:, j].mean(), se, V[j])
            out.append(CheckResult(name_v, PASS if ok else FAIL, f"max |dev|/SE = {z:.2f}"))
            se_g = grads[:, j, :].std(axis=0, ddof=1) / np.sqrt(n_batches)
            ok, z = _within(grads[:, j, :].mean(axis=0), se_g, G[j])
            out.append(CheckResult(name_g, PASS if ok else FAIL, f"max |dev|/SE = {z:.2f}"))

    # tail calibration: observed frequency of small errors versus the lower bound
    for mode in ("on", "off"):
        if clip is not None:
            out.append(CheckResult(f"tail calibration [{mode}]", SKIPPED, "bounds assume unclipped weights"))
            continue
        vals, grads, n_on = sample_batches(spec, target, behavior, mode, tail_trials, tail_batch_size, seed + 1)
        N_bar = int(n_on[0])
        N_tilde = tail_batch_size - N_bar
        worst = []
        ok = True
        for j, c in enumerate(consts):
            err_v = np.abs(vals[:, j] - V[j])
            err_g = np.linalg.norm(grads[:, j, :] - G[j], axis=1)
            for eps in epsilons:
                pv = tail_bound_value(eps, tail_batch_size, N_bar, N_tilde, c.phi_j, c.phi_bar_j)
                pg = tail_bound_gradient(eps, tail_batch_size, N_bar, N_tilde, c.psi_j, c.psi_bar_j, d)
                fv, fg = float(np.mean(err_v <= eps)), float(np.mean(err_g <= eps))
                ok &= fv >= pv and fg >= pg
                worst.append(min(fv - pv, fg - pg))
        out.append(CheckResult(f"tail calibration [{mode}]", PASS if ok else FAIL,
                               f"min(frequency - bound) = {min(worst):.4f}"))
    return out
