"""Benchmark environments: planar navigation among boxes and a cart-pole near a wall.

Both are deterministic given the initial state, so the only randomness per
step comes from the policy. Each returns two reward streams: the task reward
and a constraint reward that is small and nonpositive inside the safe set
and ``1 - eps`` outside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import Cmdp

__all__ = [
    "Nav2dEnv",
    "CartPoleEnv",
    "distance_to_obstacles",
    "nav2d_step",
    "cartpole_step",
    "DEFAULT_OBSTACLES",
]

# three wall segments; the robot starts bottom-left and must weave past them to reach the top right
DEFAULT_OBSTACLES = (
    (0.0, 5.0, 3.0, 6.5),
    (4.0, 0.0, 5.5, 3.0),
    (7.0, 3.5, 10.0, 5.0),
)


def _rect_array(obstacles):
    arr = np.asarray(obstacles, dtype=float).reshape(-1, 4)
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise ValueError("obstacles must be (x_min, y_min, x_max, y_max) with positive extent")
    return arr


def _inside(s, rects):
    """(n, k) mask of points strictly inside each rectangle."""
    x, y = s[:, 0:1], s[:, 1:2]
    return (x > rects[:, 0]) & (x < rects[:, 2]) & (y > rects[:, 1]) & (y < rects[:, 3])


def _distance_batch(s, rects, bounds):
    """Distance to the nearest obstacle border or outer wall for points outside all obstacles."""
    x, y = s[:, 0:1], s[:, 1:2]
    if len(rects):
        dx = np.maximum(np.maximum(rects[:, 0] - x, 0.0), x - rects[:, 2])
        dy = np.maximum(np.maximum(rects[:, 1] - y, 0.0), y - rects[:, 3])
        d_obs = np.min(np.hypot(dx, dy), axis=1)
    else:
        d_obs = np.full(len(s), np.inf)
    lo, hi = bounds
    d_wall = np.min(np.stack([s[:, 0] - lo, hi - s[:, 0], s[:, 1] - lo, hi - s[:, 1]], axis=1), axis=1)
    return np.minimum(d_obs, np.maximum(d_wall, 0.0))


@dataclass
class Nav2dEnv(Cmdp):
    """Single integrator on ``[0, 10]^2`` with axis-aligned rectangular obstacles.

    ``distance_sign = -1`` (default) makes the in-set constraint reward
    ``eps (exp(-d) - 1) <= 0``, so staying clear of obstacles lowers the
    constraint value. ``distance_sign = +1`` uses ``exp(+d)`` as written for
    the original environment, under which the constraint value is always
    positive.
    """

    obstacles: tuple = DEFAULT_OBSTACLES
    target: tuple = (8.5, 8.0)
    epsilon: float = 0.01
    dt: float = 0.1
    bounds: tuple = (0.0, 10.0)
    velocity_limit: float = 5.0
    start_low: tuple = (1.0, 1.0)
    start_high: tuple = (2.0, 2.0)
    horizon: int = 50
    gamma: float = 0.98
    distance_sign: float = -1.0
    reset_noise_dim: int = field(default=2, init=False)
    step_noise_dim: int = field(default=0, init=False)

    def __post_init__(self):
        self._rects = _rect_array(self.obstacles)
        self._target = np.asarray(self.target, dtype=float)
        if self.distance_sign not in (-1.0, 1.0):
            raise ValueError("distance_sign must be -1 or +1")
        lo, hi = self.bounds
        diag = math.hypot(hi - lo, hi - lo)
        if self.distance_sign < 0:
            b1 = max(1.0 - self.epsilon, self.epsilon)
        else:
            b1 = max(1.0 - self.epsilon, self.epsilon * (math.exp((hi - lo) / 2.0) - 1.0))
        self.reward_bounds = np.array([diag, b1])
        start = np.array([self.start_low, self.start_high], dtype=float)
        if np.any(_inside(start, self._rects)):
            raise ValueError("start region corners lie inside an obstacle")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def state_low(self):
        return (self.bounds[0], self.bounds[0])

    @property
    def state_high(self):
        return (self.bounds[1], self.bounds[1])

    def in_safe_set(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        return ~np.any(_inside(s, self._rects), axis=1)

    def constraint_reward(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        safe = self.in_safe_set(s)
        d = _distance_batch(s, self._rects, self.bounds)
        inside = self.epsilon * np.expm1(self.distance_sign * np.where(safe, d, 0.0))
        return np.where(safe, inside, 1.0 - self.epsilon)

    def reset_from_uniform(self, u):
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        lo, hi = np.asarray(self.start_low), np.asarray(self.start_high)
        return lo + u * (hi - lo)

    def step_from_uniform(self, s, a, u):
        s = np.asarray(s, dtype=float).reshape(-1, 2)
        a = np.clip(np.asarray(a, dtype=float).reshape(-1, 2), -self.velocity_limit, self.velocity_limit)
        s_next = np.clip(s + self.dt * a, *self.bounds)
        r0 = -np.linalg.norm(s_next - self._target, axis=1)
        r1 = self.constraint_reward(s_next)
        return s_next, np.stack([r0, r1], axis=1), np.zeros(len(s), dtype=bool)


def distance_to_obstacles(env: Nav2dEnv, s) -> float:
    """Euclidean distance from a free point to the closest obstacle border or outer wall."""
    s = np.asarray(s, dtype=float).reshape(1, 2)
    if not env.in_safe_set(s)[0]:
        raise ValueError("point lies inside an obstacle")
    return float(_distance_batch(s, env._rects, env.bounds)[0])


def nav2d_step(env: Nav2dEnv, s, a, rng=None):
    s_next, r, _ = env.step_from_uniform(np.asarray(s)[None], np.asarray(a)[None], np.zeros((1, 0)))
    return s_next[0], r[0]


@dataclass
class CartPoleEnv(Cmdp):
    """Classical cart-pole with a force input and a wall at ``x = wall``.

    State ``(x, angle, x_dot, angle_dot)``; RK4 integration. An episode ends
    when the pole leaves the band ``|angle| < angle_limit``.
    """

    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.81
    force_limit: float = 3.0
    dt: float = 0.02
    wall: float = 0.5
    epsilon: float = 0.1
    angle_limit: float = math.pi / 4
    init_spread: float = 0.05
    horizon: int = 200
    gamma: float = 0.995
    reset_noise_dim: int = field(default=4, init=False)
    step_noise_dim: int = field(default=0, init=False)

    def __post_init__(self):
        self.reward_bounds = np.array([1.0, max(1.0 - self.epsilon, self.epsilon)])

    @property
    def state_dim(self) -> int:
        return 4

    # box used for policy centers and binned baselines
    state_low = (-3.0, -math.pi / 4, -1.0, -1.5)
    state_high = (3.0, math.pi / 4, 1.0, 1.5)

    def derivatives(self, s, force):
        x, th, xd, thd = s.T
        total = self.cart_mass + self.pole_mass
        sin, cos = np.sin(th), np.cos(th)
        tmp = (force + self.pole_mass * self.half_length * thd**2 * sin) / total
        thdd = (self.gravity * sin - cos * tmp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total)
        )
        xdd = tmp - self.pole_mass * self.half_length * thdd * cos / total
        return np.stack([xd, thd, xdd, thdd], axis=1)

    def integrate(self, s, force, dt=None):
        dt = self.dt if dt is None else dt
        k1 = self.derivatives(s, force)
        k2 = self.derivatives(s + 0.5 * dt * k1, force)
        k3 = self.derivatives(s + 0.5 * dt * k2, force)
        k4 = self.derivatives(s + dt * k3, force)
        return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def in_safe_set(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        return s[:, 0] < self.wall

    def constraint_reward(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        d = s[:, 0] - self.wall
        return np.where(d <= 0, self.epsilon * np.expm1(np.minimum(d, 0.0)), 1.0 - self.epsilon)

    def reset_from_uniform(self, u):
        u = np.asarray(u, dtype=float).reshape(-1, 4)
        return self.init_spread * (2.0 * u - 1.0)

    def step_from_uniform(self, s, a, u):
        s = np.asarray(s, dtype=float).reshape(-1, 4)
        force = np.clip(np.asarray(a, dtype=float).reshape(len(s), -1)[:, 0], -self.force_limit, self.force_limit)
        s_next = self.integrate(s, force)
        r = np.stack([np.ones(len(s)), self.constraint_reward(s_next)], axis=1)
        done = np.abs(s_next[:, 1]) >= self.angle_limit
        return s_next, r, done


def cartpole_step(env: CartPoleEnv, s, a, rng=None):
    s_next, r, done = env.step_from_uniform(np.asarray(s)[None], np.atleast_1d(a)[None], np.zeros((1, 0)))
    return s_next[0], r[0], bool(done[0])
