"""CMDP interface, episode rollouts, and an exact enumeration oracle for tabular CMDPs.

Environments are vectorized: they map a batch of states, actions and
uniform draws to next states and reward rows. Every episode consumes its
own random stream derived from ``(seed, iteration, index)``, so a batch is
reproducible regardless of how episodes are grouped.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Cmdp",
    "TabularCmdp",
    "Episode",
    "EpisodeBatch",
    "episode_rng",
    "rollout",
    "rollout_batch",
    "enumerate_paths",
    "oracle_value",
    "oracle_gradient",
    "discounted_returns",
    "reward_sign",
    "write_episodes",
    "read_episodes",
    "default_tabular",
]

ENUMERATION_BUDGET = 10_000_000
EPISODE_FORMAT = "rsgf-episode/1"


def reward_sign(j: int) -> float:
    """Stream 0 is a reward to maximize, so its value carries a minus sign."""
    return -1.0 if j == 0 else 1.0


def episode_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration), int(index)]))


class Cmdp:
    """Base class for vectorized constrained MDPs.

    Subclasses set ``horizon``, ``gamma``, ``reward_bounds`` (one per reward
    stream, objective first), ``reset_noise_dim``, ``step_noise_dim`` and
    implement :meth:`reset_from_uniform` and :meth:`step_from_uniform`.
    """

    horizon: int
    gamma: float
    reward_bounds: np.ndarray
    reset_noise_dim: int = 1
    step_noise_dim: int = 0

    @property
    def n_rewards(self) -> int:
        return len(self.reward_bounds)

    @property
    def n_constraints(self) -> int:
        return self.n_rewards - 1

    def reset_from_uniform(self, u):
        raise NotImplementedError

    def step_from_uniform(self, s, a, u):
        """Return ``(next_states, rewards[n, q+1], terminated[n])``."""
        raise NotImplementedError

    def reset(self, rng):
        return self.reset_from_uniform(rng.random((1, self.reset_noise_dim)))[0]

    def step(self, s, a, rng):
        s_next, r, done = self.step_from_uniform(
            np.asarray(s)[None], np.asarray(a)[None], rng.random((1, self.step_noise_dim))
        )
        return s_next[0], r[0], bool(done[0])


class TabularCmdp(Cmdp):
    """Finite CMDP with explicit transition, reward and initial probabilities.

    Parameters
    ----------
    transitions : array (S, A, S)
    rewards : array (q+1, S, A, S)
    initial : array (S,)
    """

    reset_noise_dim = 1
    step_noise_dim = 1

    def __init__(self, transitions, rewards, initial, horizon: int, gamma: float, reward_bounds=None):
        self.transitions = np.asarray(transitions, dtype=float)
        self.rewards = np.asarray(rewards, dtype=float)
        self.initial = np.asarray(initial, dtype=float)
        S, A, S2 = self.transitions.shape
        if S != S2 or self.rewards.shape[1:] != (S, A, S) or self.initial.shape != (S,):
            raise ValueError("inconsistent tabular shapes")
        if not np.allclose(self.transitions.sum(axis=2), 1.0) or not np.isclose(self.initial.sum(), 1.0):
            raise ValueError("probabilities must sum to one")
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.n_states, self.n_actions = S, A
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        if reward_bounds is None:
            reward_bounds = np.max(np.abs(self.rewards.reshape(self.rewards.shape[0], -1)), axis=1)
        self.reward_bounds = np.asarray(reward_bounds, dtype=float)

    def reset_from_uniform(self, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        cdf = np.cumsum(self.initial)
        return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), self.n_states - 1)

    def step_from_uniform(self, s, a, u):
        s = np.asarray(s, dtype=int).reshape(-1)
        a = np.asarray(a, dtype=int).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1, 1)
        cdf = np.cumsum(self.transitions[s, a], axis=1)
        s_next = np.minimum(np.sum(cdf <= u * cdf[:, -1:], axis=1), self.n_states - 1)
        r = self.rewards[:, s, a, s_next].T
        return s_next, r, np.zeros(len(s), dtype=bool)


@dataclass
class Episode:
    """One trajectory ``[s_0, a_0, ..., s_T, a_T, s_{T+1}]`` with its reward streams.

    ``length`` counts realized steps; when an environment terminates early the
    remaining rewards are zero and the final state is repeated.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_prob: float
    behavior_theta: np.ndarray | None = None
    length: int | None = None
    tag: str = ""
    iteration: int = 0
    index: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.actions = np.asarray(self.actions)
        self.rewards = np.atleast_2d(np.asarray(self.rewards, dtype=float))
        n_steps = self.actions.shape[0]
        if self.states.shape[0] != n_steps + 1:
            raise ValueError("an episode needs exactly one more state than actions")
        if self.rewards.shape[1] != n_steps:
            raise ValueError("reward rows must have one entry per action")
        if self.length is None:
            self.length = n_steps
        if self.behavior_theta is not None:
            self.behavior_theta = np.asarray(self.behavior_theta, dtype=float).ravel()

    @property
    def horizon(self) -> int:
        return self.actions.shape[0] - 1

    def to_record(self) -> dict:
        return {
            "format": EPISODE_FORMAT,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "log_prob": float(self.log_prob),
            "behavior_theta": None if self.behavior_theta is None else self.behavior_theta.tolist(),
            "length": int(self.length),
            "tag": self.tag,
            "iteration": int(self.iteration),
            "index": int(self.index),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        if rec.get("format") != EPISODE_FORMAT:
            raise ValueError(f"unknown episode record format {rec.get('format')!r}")
        return cls(
            states=np.asarray(rec["states"]),
            actions=np.asarray(rec["actions"]),
            rewards=np.asarray(rec["rewards"], dtype=float),
            log_prob=rec["log_prob"],
            behavior_theta=rec["behavior_theta"],
            length=rec["length"],
            tag=rec["tag"],
            iteration=rec["iteration"],
            index=rec["index"],
        )


@dataclass
class EpisodeBatch:
    """Stacked episodes, the layout the estimators work on."""

    states: np.ndarray  # (n, T+2, ...)
    actions: np.ndarray  # (n, T+1, ...)
    rewards: np.ndarray  # (n, q+1, T+1)
    log_prob: np.ndarray  # (n,)
    lengths: np.ndarray  # (n,)
    behavior_thetas: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    iterations: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.log_prob)
        if not self.behavior_thetas:
            self.behavior_thetas = [None] * n
        if not self.tags:
            self.tags = [""] * n
        if self.iterations is None:
            self.iterations = np.zeros(n, dtype=int)
        if self.indices is None:
            self.indices = np.arange(n)

    def __len__(self) -> int:
        return len(self.log_prob)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1] - 1

    @property
    def step_mask(self) -> np.ndarray:
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise ValueError("empty episode list")
        return cls(
            states=np.stack([e.states for e in episodes]),
            actions=np.stack([e.actions for e in episodes]),
            rewards=np.stack([e.rewards for e in episodes]),
            log_prob=np.array([e.log_prob for e in episodes], dtype=float),
            lengths=np.array([e.length for e in episodes], dtype=int),
            behavior_thetas=[e.behavior_theta for e in episodes],
            tags=[e.tag for e in episodes],
            iterations=np.array([e.iteration for e in episodes], dtype=int),
            indices=np.array([e.index for e in episodes], dtype=int),
        )

    @classmethod
    def concatenate(cls, batches: Iterable["EpisodeBatch"]) -> "EpisodeBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("no episodes to concatenate")
        return cls(
            states=np.concatenate([b.states for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            log_prob=np.concatenate([b.log_prob for b in batches]),
            lengths=np.concatenate([b.lengths for b in batches]),
            behavior_thetas=[t for b in batches for t in b.behavior_thetas],
            tags=[t for b in batches for t in b.tags],
            iterations=np.concatenate([b.iterations for b in batches]),
            indices=np.concatenate([b.indices for b in batches]),
        )

    def subset(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx, dtype=int)
        return EpisodeBatch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            log_prob=self.log_prob[idx],
            lengths=self.lengths[idx],
            behavior_thetas=[self.behavior_thetas[i] for i in idx],
            tags=[self.tags[i] for i in idx],
            iterations=self.iterations[idx],
            indices=self.indices[idx],
        )

    def episodes(self) -> list[Episode]:
        return [
            Episode(
                self.states[k], self.actions[k], self.rewards[k], float(self.log_prob[k]),
                self.behavior_thetas[k], int(self.lengths[k]), self.tags[k],
                int(self.iterations[k]), int(self.indices[k]),
            )
            for k in range(len(self))
        ]


def rollout_batch(env: Cmdp, policy, n_episodes: int, seed: int, iteration: int = 0,
                  start_index: int = 0, tag: str = "") -> EpisodeBatch:
    """Generate ``n_episodes`` episodes of ``T+1`` steps with ``policy``.

    Episode ``k`` draws all its randomness from
    ``episode_rng(seed, iteration, start_index + k)``.
    """
    T = env.horizon
    n_steps = T + 1
    r_dim, a_dim, e_dim = env.reset_noise_dim, policy.noise_dim, max(env.step_noise_dim, 0)
    width = r_dim + n_steps * (a_dim + e_dim)
    u = np.empty((n_episodes, width))
    for k in range(n_episodes):
        u[k] = episode_rng(seed, iteration, start_index + k).random(width)
    u_reset = u[:, :r_dim]
    u_act = u[:, r_dim:r_dim + n_steps * a_dim].reshape(n_episodes, n_steps, a_dim)
    u_env = u[:, r_dim + n_steps * a_dim:].reshape(n_episodes, n_steps, e_dim)

    s = env.reset_from_uniform(u_reset)
    states = [s]
    actions, rewards, logps = [], [], []
    alive = np.ones(n_episodes, dtype=bool)
    lengths = np.full(n_episodes, n_steps, dtype=int)
    last_a = None
    for t in range(n_steps):
        a = policy.sample_from_uniform(s, u_act[:, t])
        if last_a is not None:
            a = np.where(_expand(alive, a), a, last_a)
        lp = policy.log_prob(a, s)
        s_next, r, done = env.step_from_uniform(s, a, u_env[:, t])
        if not np.all(np.isfinite(np.asarray(s_next, dtype=float))) or not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise FloatingPointError(f"non-finite state or action at step {t}")
        r = np.where(alive[:, None], r, 0.0)
        lp = np.where(alive, lp, 0.0)
        s_next = np.where(_expand(alive, s_next), s_next, s)
        newly_done = alive & done
        lengths[newly_done] = t + 1
        alive = alive & ~done
        actions.append(a)
        rewards.append(r)
        logps.append(lp)
        states.append(s_next)
        s, last_a = s_next, a
    theta = np.asarray(policy.theta, dtype=float).copy()
    return EpisodeBatch(
        states=np.stack(states, axis=1),
        actions=np.stack(actions, axis=1),
        rewards=np.stack(rewards, axis=2),
        log_prob=np.sum(np.stack(logps, axis=1), axis=1),
        lengths=lengths,
        behavior_thetas=[theta] * n_episodes,
        tags=[tag] * n_episodes,
        iterations=np.full(n_episodes, iteration, dtype=int),
        indices=np.arange(start_index, start_index + n_episodes),
    )


def _expand(mask, like):
    like = np.asarray(like)
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


def rollout(env: Cmdp, policy, rng: np.random.Generator, tag: str = "") -> Episode:
    """Single episode driven by ``rng``; seeds a dedicated stream from it."""
    seed = int(rng.integers(0, 2**63 - 1))
    return rollout_batch(env, policy, 1, seed, tag=tag).episodes()[0]


def discounted_returns(rewards, gamma: float, lengths=None) -> np.ndarray:
    """``sum_t gamma^t R_j`` for a stack of reward matrices ``(..., q+1, T+1)``."""
    rewards = np.asarray(rewards, dtype=float)
    disc = gamma ** np.arange(rewards.shape[-1])
    return rewards @ disc


# -- exact enumeration oracle --------------------------------------------------

def enumerate_paths(spec: TabularCmdp, policy):
    """All trajectories with their probabilities.

    Returns ``(states[n, T+2], actions[n, T+1], prob[n])``.
    """
    S, A, T = spec.n_states, spec.n_actions, spec.horizon
    n_paths = S ** (T + 2) * A ** (T + 1)
    if n_paths > ENUMERATION_BUDGET:
        raise ValueError(
            f"{n_paths} trajectories exceed the enumeration budget of {ENUMERATION_BUDGET}; use a smaller horizon"
        )
    pi = policy.probs(np.arange(S))  # (S, A)
    grid = np.array(list(itertools.product(range(S), range(A), repeat=T + 1)), dtype=int)
    grid = grid.reshape(-1, T + 1, 2)
    states_head, actions = grid[:, :, 0], grid[:, :, 1]
    last = np.repeat(np.arange(S), len(grid))
    states = np.concatenate([np.tile(states_head, (S, 1)), last[:, None]], axis=1)
    actions = np.tile(actions, (S, 1))
    prob = spec.initial[states[:, 0]].copy()
    for t in range(T + 1):
        prob *= pi[states[:, t], actions[:, t]]
        prob *= spec.transitions[states[:, t], actions[:, t], states[:, t + 1]]
    return states, actions, prob


def _path_returns(spec: TabularCmdp, states, actions, j: int):
    T = spec.horizon
    ret = np.zeros(len(states))
    for t in range(T + 1):
        ret += spec.gamma**t * spec.rewards[j, states[:, t], actions[:, t], states[:, t + 1]]
    return ret


def oracle_value(spec: TabularCmdp, policy, j: int) -> float:
    """Exact signed value ``V_j`` by summing over every trajectory."""
    states, actions, prob = enumerate_paths(spec, policy)
    return reward_sign(j) * float(prob @ _path_returns(spec, states, actions, j))


def oracle_gradient(spec: TabularCmdp, policy, j: int) -> np.ndarray:
    """Exact ``grad V_j`` via the likelihood-ratio identity over all trajectories."""
    states, actions, prob = enumerate_paths(spec, policy)
    weight = prob * _path_returns(spec, states, actions, j)
    S, A = spec.n_states, spec.n_actions
    s_all = np.repeat(np.arange(S), A)
    a_all = np.tile(np.arange(A), S)
    scores = policy.grad_log_prob(a_all, s_all).reshape(S, A, -1)
    mass = np.zeros((S, A))
    for t in range(spec.horizon + 1):
        np.add.at(mass, (states[:, t], actions[:, t]), weight)
    return reward_sign(j) * np.einsum("sa,sad->d", mass, scores)


# -- persistence ------------------------------------------------------------------

def write_episodes(path, episodes) -> None:
    """One JSON record per line; floats round-trip exactly."""
    if isinstance(episodes, EpisodeBatch):
        episodes = episodes.episodes()
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record()) + "\n")


def read_episodes(path) -> list[Episode]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(Episode.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad episode record ({exc})") from exc
    return out


def default_tabular(theta=None, horizon: int = 2, gamma: float = 0.9):
    """Two-state, two-action CMDP with a conflicting reward and cost.

    Action 1 pushes the chain towards state 1, which earns reward but also
    costs ``1 - budget``; the constraint is active near the optimum. Returns
    ``(spec, policy)`` where the policy is the discretized RBF policy with
    two centers at the state points.
    """
    from .policy import DiscretizedRbfPolicy, RbfGaussianPolicy

    budget = 0.45
    P = np.zeros((2, 2, 2))
    P[:, 0] = [0.8, 0.2]
    P[:, 1] = [0.2, 0.8]
    R = np.zeros((2, 2, 2, 2))
    R[0, :, :, 1] = 1.0
    R[1] = np.where(np.arange(2)[None, None, :] == 1, 1.0 - budget, -budget)
    R[1] += np.array([0.0, 0.05])[None, :, None]  # pushing also costs a little
    spec = TabularCmdp(P, R, [0.5, 0.5], horizon, gamma, reward_bounds=[1.0, 0.6])
    base = RbfGaussianPolicy([[0.0], [1.0]], 0.5, 1.0, [-1.0], [1.0], theta=theta)
    return spec, DiscretizedRbfPolicy(base, [[0.0], [1.0]], [[-0.5], [0.5]])
