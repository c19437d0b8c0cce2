"""Importance-sampled value and gradient estimates from stored episodes.

Each episode in a batch carries the log probability its behavior policy
assigned to the realized actions. Trajectory weights are formed in log space
and exponentiated once; episodes whose behavior parameters equal the target
parameters get weight exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Episode, EpisodeBatch, reward_sign

__all__ = [
    "EstimateBundle",
    "StatConstants",
    "ZeroBaseline",
    "ConstantBaseline",
    "BinnedBaseline",
    "is_weight",
    "trajectory_weights",
    "estimate_value",
    "estimate_gradient",
    "estimate_bundle",
    "episode_contributions",
    "stat_constants",
    "tail_bound_value",
    "tail_bound_gradient",
    "on_policy_mask",
]


@dataclass
class EstimateBundle:
    values: np.ndarray  # constraint values, j = 1..q
    gradients: np.ndarray  # (q+1, d), objective first
    objective_value: float
    batch_size: int
    on_policy_count: int
    off_policy_count: int
    clip_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.batch_size != self.on_policy_count + self.off_policy_count:
            raise ValueError("batch size must equal on-policy plus off-policy counts")

    @property
    def all_values(self) -> np.ndarray:
        return np.concatenate(([self.objective_value], self.values))


@dataclass
class StatConstants:
    j: int
    phi_j: float
    phi_bar_j: float
    psi_j: float
    psi_bar_j: float
    phi_tilde: np.ndarray | None = None
    psi_tilde: np.ndarray | None = None


# -- baselines --------------------------------------------------------------------

class ZeroBaseline:
    bound = 0.0

    def __call__(self, states):
        return np.zeros(len(states))


class ConstantBaseline:
    def __init__(self, value: float):
        self.value = float(value)
        self.bound = abs(self.value)

    def __call__(self, states):
        return np.full(len(states), self.value)


class BinnedBaseline:
    """Mean reward-to-go per cell of a coarse state grid, refreshed each iteration.

    ``bound`` is the largest magnitude the baseline has produced so far.
    """

    def __init__(self, low, high, bins, stream: int, gamma: float):
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))
        self.bins = np.broadcast_to(np.asarray(bins, dtype=int), self.low.shape).copy()
        self.stream = int(stream)
        self.gamma = float(gamma)
        self.table = np.zeros(int(np.prod(self.bins)))
        self.bound = 0.0

    def _cells(self, states):
        states = np.asarray(states, dtype=float).reshape(len(states), -1)
        frac = (states - self.low) / (self.high - self.low)
        idx = np.clip((frac * self.bins).astype(int), 0, self.bins - 1)
        return np.ravel_multi_index(idx.T, self.bins)

    def __call__(self, states):
        return self.table[self._cells(states)]

    def update(self, batch: EpisodeBatch) -> None:
        rtg = _rewards_to_go(batch.rewards[:, self.stream, :], self.gamma)
        mask = batch.step_mask
        s = batch.states[:, :-1][mask]
        cells = self._cells(s)
        sums = np.bincount(cells, weights=rtg[mask], minlength=self.table.size)
        counts = np.bincount(cells, minlength=self.table.size)
        seen = counts > 0
        self.table[seen] = sums[seen] / counts[seen]
        self.bound = max(self.bound, float(np.max(np.abs(self.table))))


# -- weights ------------------------------------------------------------------------

def _as_batch(batch) -> EpisodeBatch:
    if isinstance(batch, EpisodeBatch):
        return batch
    if isinstance(batch, Episode):
        return EpisodeBatch.from_episodes([batch])
    return EpisodeBatch.from_episodes(list(batch))


def on_policy_mask(batch: EpisodeBatch, target_policy) -> np.ndarray:
    theta = np.asarray(target_policy.theta, dtype=float)
    return np.array(
        [bt is not None and bt.shape == theta.shape and np.array_equal(bt, theta) for bt in batch.behavior_thetas]
    )


def _flat_steps(arr, n_steps):
    arr = arr[:, :n_steps]
    return arr.reshape((-1,) + arr.shape[2:])


def trajectory_weights(batch, target_policy, clip=None) -> np.ndarray:
    """Per-episode ratio of target to behavior trajectory probability."""
    batch = _as_batch(batch)
    n, n_steps = len(batch), batch.actions.shape[1]
    on = on_policy_mask(batch, target_policy)
    w = np.ones(n)
    off = np.flatnonzero(~on)
    if off.size:
        sub = batch.subset(off)
        lp = target_policy.log_prob(_flat_steps(sub.actions, n_steps), _flat_steps(sub.states, n_steps))
        lp = np.asarray(lp).reshape(off.size, n_steps)
        log_w = np.sum(np.where(sub.step_mask, lp, 0.0), axis=1) - sub.log_prob
        with np.errstate(over="ignore"):
            w[off] = np.exp(log_w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite importance weight; behavior density below the assumed floor")
    if clip is not None:
        w = np.clip(w, clip[0], clip[1])
    return w


def is_weight(episode, target_policy, clip=None) -> float:
    return float(trajectory_weights(_as_batch(episode), target_policy, clip)[0])


# -- estimators ---------------------------------------------------------------------

def _rewards_to_go(rewards, gamma):
    """Reverse discounted cumulative sums along the last axis."""
    out = np.empty_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


def estimate_value(j: int, batch, target_policy, gamma: float, clip=None) -> float:
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    w = trajectory_weights(batch, target_policy, clip)
    ret = batch.rewards[:, j, :] @ (gamma ** np.arange(batch.rewards.shape[2]))
    return reward_sign(j) * float(np.mean(w * ret))


def _check_baseline(baseline, values):
    bound = getattr(baseline, "bound", None)
    if bound is not None and np.max(np.abs(values), initial=0.0) > bound + 1e-12:
        raise ValueError(f"baseline exceeds its declared bound {bound}")


def estimate_gradient(j: int, batch, target_policy, gamma: float, baseline=None, clip=None) -> np.ndarray:
    return estimate_bundle(batch, target_policy, gamma, baselines={j: baseline}, clip=clip, streams=[j]).gradients[0]


def episode_contributions(batch, target_policy, gamma: float, baselines=None, clip=None, streams=None):
    """Per-episode summands of the value and gradient estimates.

    Returns ``(values[n, q+1], gradients[n, m, d], on_policy[n])`` with signs
    applied, so any estimate is the mean of its episodes' rows.
    """
    batch = _as_batch(batch)
    n = len(batch)
    n_streams = batch.rewards.shape[1]
    n_steps = batch.actions.shape[1]
    streams = list(range(n_streams)) if streams is None else list(streams)
    baselines = baselines or {}

    on = on_policy_mask(batch, target_policy)
    w = trajectory_weights(batch, target_policy, clip)
    disc = gamma ** np.arange(n_steps)
    signs = np.array([reward_sign(j) for j in range(n_streams)])
    values = signs * w[:, None] * (batch.rewards @ disc)

    mask = batch.step_mask
    s_flat = _flat_steps(batch.states, n_steps)
    scores = np.asarray(target_policy.grad_log_prob(_flat_steps(batch.actions, n_steps), s_flat))
    scores = scores.reshape(n, n_steps, -1)
    rtg = _rewards_to_go(batch.rewards, gamma)  # (n, q+1, T+1)
    coeffs = []
    for j in streams:
        b = baselines.get(j)
        if b is None:
            D = rtg[:, j, :]
        else:
            bv = np.asarray(b(s_flat), dtype=float)
            _check_baseline(b, bv[mask.ravel()])
            D = rtg[:, j, :] - bv.reshape(n, n_steps)
        coeffs.append(signs[j] * w[:, None] * disc[None, :] * np.where(mask, D, 0.0))
    C = np.stack(coeffs, axis=1)  # (n, m, T+1)
    grads = np.einsum("njt,ntd->njd", C, scores)
    return values, grads, on


def estimate_bundle(batch, target_policy, gamma: float, baselines=None, clip=None, streams=None):
    """Value estimates for every constraint and gradient estimates for every stream.

    ``baselines`` maps stream index to a baseline callable (default zero).
    When ``streams`` is given only those gradients are computed and returned
    in that order (values are still reported for all constraints).
    """
    batch = _as_batch(batch)
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    clip = None if clip is None else (float(clip[0]), float(clip[1]))
    values, grads, on = episode_contributions(batch, target_policy, gamma, baselines, clip, streams)
    # fixed-order reduction keeps results independent of how the batch was assembled
    v = values.sum(axis=0) / n
    g = grads.sum(axis=0) / n
    return EstimateBundle(
        values=v[1:],
        gradients=g,
        objective_value=float(v[0]),
        batch_size=n,
        on_policy_count=int(on.sum()),
        off_policy_count=int(n - on.sum()),
        clip_range=clip,
    )


# -- statistical constants -------------------------------------------------------

def _geometric(gamma, T):
    """sum_{t=0}^T gamma^t"""
    return (1.0 - gamma ** (T + 1)) / (1.0 - gamma)


def _weighted_geometric(gamma, T):
    """sum_{t=0}^T t gamma^t"""
    return gamma * (1.0 - (T + 1) * gamma**T + T * gamma ** (T + 1)) / (1.0 - gamma) ** 2


def stat_constants(j: int, B_j: float, B_hat: float, gamma: float, T: int, nu: float, B_tilde: float,
                   theta=None, behavior_thetas=None, L_tilde=None) -> StatConstants:
    """Magnitude constants for the value and gradient estimates.

    With ``theta``, ``behavior_thetas`` and ``L_tilde`` the per-episode
    proximity-aware constants are also returned.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    G = _geometric(gamma, T)
    phi = B_j * G
    # sum_t gamma^t sum_{t'>=t} (gamma^{t'-t} B_j + B_hat)
    inner = B_j * (G - (T + 1) * gamma ** (T + 1)) / (1.0 - gamma) + B_hat * ((T + 1) * G - _weighted_geometric(gamma, T))
    psi = B_tilde * inner
    with np.errstate(over="ignore"):
        floor = nu ** (T + 1)
        phi_bar = phi / floor if floor > 0 else np.inf
        psi_bar = psi / floor if floor > 0 else np.inf
    phi_tilde = psi_tilde = None
    if theta is not None and behavior_thetas is not None and L_tilde is not None:
        theta = np.asarray(theta, dtype=float)
        dist = np.array([np.linalg.norm(theta - np.asarray(bt, dtype=float)) for bt in behavior_thetas])
        with np.errstate(over="ignore"):
            factor = np.exp((T + 1) * L_tilde * dist)
        phi_tilde, psi_tilde = phi * factor, psi * factor
    return StatConstants(int(j), float(phi), float(phi_bar), float(psi), float(psi_bar), phi_tilde, psi_tilde)


def _spread(N_bar, N_tilde, a, a_bar):
    total = 0.0
    if N_bar:
        total += N_bar * a**2
    if N_tilde:
        total += N_tilde * a_bar**2
    return total


def tail_bound_value(epsilon, J, N_bar, N_tilde, phi, phi_bar) -> float:
    """Lower bound on P(|V_hat - V| <= epsilon)."""
    spread = _spread(N_bar, N_tilde, phi, phi_bar)
    if spread == 0:
        return 1.0
    p = 1.0 - 2.0 * np.exp(-(epsilon**2) * J**2 / (2.0 * spread))
    return float(np.clip(p, 0.0, 1.0))


def tail_bound_gradient(epsilon, J, N_bar, N_tilde, psi, psi_bar, d) -> float:
    """Lower bound on P(||grad V_hat - grad V|| <= epsilon)."""
    spread = _spread(N_bar, N_tilde, psi, psi_bar)
    if spread == 0:
        return 1.0
    p = 1.0 - 2.0 * d * np.exp(-(epsilon**2) * J**2 / (2.0 * d * spread))
    return float(np.clip(p, 0.0, 1.0))
