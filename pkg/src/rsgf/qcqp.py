"""Strongly convex QCQP defining the robust safe gradient direction.

The subproblem is::

    min_xi  1/2 ||xi + g0||^2
    s.t.    a_j + g_j^T xi + (beta/2) ||xi||^2 <= 0,   j = 1..m

where ``a_j = alpha * V_j(theta)`` and ``g_j = grad V_j(theta)``. For a fixed
multiplier vector ``u >= 0`` the Lagrangian is minimized in closed form by
``xi(u) = -(g0 + sum_j u_j g_j) / (1 + beta * sum_j u_j)``, so the solver works
on the tiny ``m``-dimensional dual. Every dual quantity only depends on the
Gram matrix of ``[g0, g_1, ..., g_m]``, which keeps the cost independent of
``d`` after one matrix product.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Status",
    "QcqpProblem",
    "QcqpSolution",
    "SlaterResult",
    "build_subproblem",
    "solve",
    "closed_form_direction",
    "constraint_values",
    "kkt_residual",
    "slater_probe",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 10_000
DIVERGENCE_LEVEL = 1e12


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class QcqpProblem:
    """Data of one subproblem.

    ``levels[j]`` is the already scaled level ``alpha * V_j`` and
    ``gradients[j]`` the matching gradient row.
    """

    g0: np.ndarray
    levels: np.ndarray
    gradients: np.ndarray
    beta: float

    def __post_init__(self):
        g0 = np.asarray(self.g0, dtype=float).reshape(-1)
        levels = np.asarray(self.levels, dtype=float).reshape(-1)
        grads = np.asarray(self.gradients, dtype=float)
        if grads.size == 0:
            grads = grads.reshape(len(levels), g0.size)
        if grads.ndim != 2 or grads.shape != (len(levels), g0.size):
            raise ValueError(
                f"gradients must have shape ({len(levels)}, {g0.size}), got {grads.shape}"
            )
        if not self.beta > 0:
            raise ValueError("beta must be strictly positive")
        object.__setattr__(self, "g0", g0)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "gradients", grads)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def dim(self) -> int:
        return self.g0.size

    @property
    def n_constraints(self) -> int:
        return self.levels.size

    @classmethod
    def from_pairs(cls, g0, constraints: Sequence[tuple[float, Sequence[float]]], beta: float):
        """Build from ``[(a_j, g_j), ...]`` pairs."""
        g0 = np.asarray(g0, dtype=float)
        levels = np.array([c[0] for c in constraints], dtype=float)
        grads = np.array([np.asarray(c[1], dtype=float) for c in constraints], dtype=float)
        if not constraints:
            grads = np.zeros((0, g0.size))
        return cls(g0, levels, grads, beta)

    def objective(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        return 0.5 * float(np.sum((xi + self.g0) ** 2))


@dataclass
class QcqpSolution:
    status: Status
    xi: np.ndarray | None
    multipliers: np.ndarray
    kkt_residual: float
    active_set: tuple[int, ...] = ()
    iterations: int = 0
    constraint_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class SlaterResult:
    strictly_feasible: bool
    witness: np.ndarray | None
    margin: float = -np.inf


def build_subproblem(theta, estimates, alpha: float, beta_fn, bound_C: float) -> QcqpProblem:
    """Assemble the estimated subproblem plus the exact norm-bounding constraint.

    ``estimates`` is an :class:`rsgf.estimate.EstimateBundle` (or anything with
    ``values`` for j = 1..q and ``gradients`` for j = 0..q). The extra
    constraint ``||theta||^2 - C <= 0`` keeps iterates in a ball.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if bound_C <= 0:
        raise ValueError("bound_C must be positive")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    grads = np.atleast_2d(np.asarray(estimates.gradients, dtype=float))
    values = np.asarray(estimates.values, dtype=float).reshape(-1)
    if grads.shape[1] != theta.size:
        raise ValueError(
            f"gradient dimension {grads.shape[1]} does not match theta dimension {theta.size}"
        )
    if grads.shape[0] != values.size + 1:
        raise ValueError("need q+1 gradients (objective first) and q constraint values")
    beta = float(beta_fn(theta)) if callable(beta_fn) else float(beta_fn)
    levels = np.append(alpha * values, alpha * (theta @ theta - bound_C))
    cons_grads = np.vstack([grads[1:], 2.0 * theta])
    return QcqpProblem(grads[0], levels, cons_grads, beta)


def closed_form_direction(g0, gradients, multipliers, beta: float) -> np.ndarray:
    """Minimizer of the Lagrangian for fixed multipliers."""
    g0 = np.asarray(g0, dtype=float)
    u = np.asarray(multipliers, dtype=float).reshape(-1)
    if u.size == 0:
        return -g0.copy()
    G = np.asarray(gradients, dtype=float).reshape(u.size, -1)
    return -(g0 + u @ G) / (1.0 + beta * u.sum())


def constraint_values(problem: QcqpProblem, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return problem.levels + problem.gradients @ xi + 0.5 * problem.beta * float(xi @ xi)


def kkt_residual(problem: QcqpProblem, solution: QcqpSolution) -> float:
    """Largest violation among stationarity, primal/dual feasibility, complementarity."""
    if solution.xi is None:
        return float("inf")
    return _kkt_residual(problem, solution.xi, solution.multipliers)


def _kkt_residual(problem: QcqpProblem, xi, u) -> float:
    xi = np.asarray(xi, dtype=float)
    u = np.asarray(u, dtype=float)
    c = constraint_values(problem, xi)
    stat = xi + problem.g0
    if u.size:
        stat = stat + u @ (problem.gradients + problem.beta * xi)
    parts = [float(np.linalg.norm(stat))]
    if u.size:
        parts += [
            float(np.max(np.maximum(c, 0.0))),
            float(np.max(np.maximum(-u, 0.0))),
            float(np.max(np.abs(u * c))),
        ]
    return max(parts)


class _Dual:
    """Dual function of a QCQP expressed through the Gram matrix.

    Works for ``beta >= 0`` so the linearized probe problem (``beta = 0``,
    ``g0 = 0``) reuses it.
    """

    def __init__(self, g0, levels, gradients, beta):
        self.levels = levels
        self.beta = beta
        stacked = np.vstack([g0[None, :], gradients])
        self.K = stacked @ stacked.T
        self.m = levels.size

    def evaluate(self, u):
        """Return dual value, gradient (constraint values), Hessian, and w-coefficients."""
        v = np.concatenate(([1.0], u))
        s = 1.0 + self.beta * u.sum()
        Kv = self.K @ v
        ww = float(v @ Kv)  # ||g0 + sum u_j g_j||^2
        # xi = -w / s with w = stacked^T v
        gx = -Kv[1:] / s  # g_j^T xi
        xx = ww / s**2  # ||xi||^2
        c = self.levels + gx + 0.5 * self.beta * xx
        # D(u) = min_xi L = -||w||^2 / (2 s) + sum u_j a_j
        value = -0.5 * ww / s + float(u @ self.levels)
        # rows of (g_j + beta xi) in Gram coordinates: e_j - beta v / s
        E = np.zeros((self.m, self.m + 1))
        E[:, 1:] = np.eye(self.m)
        R = E - (self.beta / s) * v[None, :]
        H = -(R @ self.K @ R.T) / s
        return value, c, H


def _dual_ascent(g0, levels, gradients, beta, tol, max_iters, u0=None):
    """Projected Newton ascent (two-metric projection) with Armijo backtracking.

    Falls back to a projected gradient step whenever the Newton direction is
    not an ascent direction. Returns ``(u, iterations, diverged)``.
    """
    m = levels.size
    dual = _Dual(g0, levels, gradients, beta)
    u = np.zeros(m) if u0 is None else np.maximum(np.asarray(u0, dtype=float), 0.0)
    value, c, H = dual.evaluate(u)
    scale = 1.0 + float(np.max(np.abs(np.diag(dual.K)), initial=0.0))
    for it in range(1, max_iters + 1):
        # projected gradient optimality for maximization over u >= 0
        pg = np.where(u > 0, c, np.maximum(c, 0.0))
        if np.max(np.abs(pg), initial=0.0) <= 0.1 * tol:
            return u, it - 1, False
        eps_bind = min(1e-12, float(np.max(np.abs(pg))))
        binding = (u <= eps_bind) & (c < 0)
        free = ~binding
        direction = np.zeros(m)
        if free.any():
            Hf = H[np.ix_(free, free)]
            reg = 1e-14 * scale
            try:
                direction[free] = np.linalg.solve(-Hf + reg * np.eye(free.sum()), c[free])
            except np.linalg.LinAlgError:
                direction[free] = c[free]
        if not float(direction @ c) > 0:
            direction = c.copy()
        t = 1.0
        improved = False
        if float(direction @ c) <= 1e-10 * (1.0 + abs(value)):
            # gain is below the resolution of the dual value; trust the full step
            u_new = np.maximum(u + direction, 0.0)
            if np.array_equal(u_new, u):
                return u, it, False
            v_new, c_new, H_new = dual.evaluate(u_new)
            u, value, c, H = u_new, v_new, c_new, H_new
            continue
        for _ in range(60):
            u_new = np.maximum(u + t * direction, 0.0)
            v_new, c_new, H_new = dual.evaluate(u_new)
            if v_new >= value + 1e-4 * float(c @ (u_new - u)) - 1e-15 * abs(value):
                improved = True
                break
            t *= 0.5
        if not improved:
            # numerical stall; try plain gradient scaled by its curvature once
            step = 1.0 / max(float(np.max(np.abs(np.diag(H)))), 1e-300)
            u_new = np.maximum(u + step * c, 0.0)
            v_new, c_new, H_new = dual.evaluate(u_new)
            if not v_new > value:
                return u, it, False
        u, value, c, H = u_new, v_new, c_new, H_new
        if float(np.linalg.norm(u)) > DIVERGENCE_LEVEL:
            return u, it, True
    return u, max_iters, False


def solve(problem: QcqpProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
          u0=None) -> QcqpSolution:
    """Solve the subproblem by dual ascent, optionally warm-started at ``u0``.

    Returns a solution with status ``OPTIMAL`` when the KKT residual reaches
    ``tol``, ``INFEASIBLE`` when the dual iterates diverge and the Slater probe
    finds no strictly feasible point, and ``MAX_ITERATIONS`` otherwise (with
    the best iterate found).
    """
    m = problem.n_constraints
    if m == 0:
        xi = -problem.g0.copy()
        return QcqpSolution(Status.OPTIMAL, xi, np.zeros(0), 0.0, (), 0, np.zeros(0))

    if u0 is not None and np.shape(u0) != (m,):
        u0 = None
    u, iters, diverged = _dual_ascent(
        problem.g0, problem.levels, problem.gradients, problem.beta, tol, max_iters, u0=u0
    )
    if diverged:
        probe = slater_probe(problem, tol=tol)
        if not probe.strictly_feasible:
            return QcqpSolution(Status.INFEASIBLE, None, u, float("inf"), (), iters)
    xi = closed_form_direction(problem.g0, problem.gradients, u, problem.beta)
    c = constraint_values(problem, xi)
    res = _kkt_residual(problem, xi, u)
    if res > tol and not diverged:
        # polish: a few extra Newton rounds from the current point
        u2, extra, _ = _dual_ascent(
            problem.g0, problem.levels, problem.gradients, problem.beta, tol * 1e-3, 50, u0=u
        )
        xi2 = closed_form_direction(problem.g0, problem.gradients, u2, problem.beta)
        res2 = _kkt_residual(problem, xi2, u2)
        iters += extra
        if res2 < res:
            u, xi, res = u2, xi2, res2
            c = constraint_values(problem, xi)
    status = Status.OPTIMAL if res <= tol else Status.MAX_ITERATIONS
    if status is Status.MAX_ITERATIONS and np.max(c) > 0:
        probe = slater_probe(problem, tol=tol)
        if not probe.strictly_feasible and np.max(c) > np.sqrt(tol):
            return QcqpSolution(Status.INFEASIBLE, None, u, float("inf"), (), iters)
    active = tuple(int(j) for j in np.flatnonzero(np.abs(c) <= max(tol, 1e-9)))
    return QcqpSolution(status, xi, u, res, active, iters, c)


def _linearized_min_norm(levels, gradients, tol):
    """min ||xi||^2 s.t. levels + gradients @ xi <= 0, via the same dual machinery."""
    d = gradients.shape[1]
    u, _, diverged = _dual_ascent(np.zeros(d), levels, gradients, 0.0, tol, 2000)
    if diverged:
        return None
    xi = -(u @ gradients)
    if np.max(levels + gradients @ xi, initial=-np.inf) > max(tol, 1e-9) * (1 + np.max(np.abs(levels))):
        return None
    return xi


def slater_probe(problem: QcqpProblem, tol: float = DEFAULT_TOL) -> SlaterResult:
    """Look for a strictly feasible point of the quadratic constraints.

    Solves the linearized minimum-norm problem (optionally with a margin) and
    scans the ray through its solution, since the quadratic term penalizes
    long steps while the linear term may require them.
    """
    if problem.n_constraints == 0:
        return SlaterResult(True, np.zeros(problem.dim), np.inf)
    a, G, beta = problem.levels, problem.gradients, problem.beta

    def margin(xi):
        return -float(np.max(constraint_values(problem, xi)))

    best_xi, best_margin = None, -np.inf
    zero_margin = margin(np.zeros(problem.dim))
    if zero_margin > tol:
        return SlaterResult(True, np.zeros(problem.dim), zero_margin)
    best_xi, best_margin = np.zeros(problem.dim), zero_margin

    shift_scale = 1.0 + float(np.max(np.abs(a)))
    for shift in (0.0, 1e-6, 1e-3, 1e-1, 1.0):
        xi_star = _linearized_min_norm(a + shift * shift_scale, G, tol)
        if xi_star is None:
            if shift == 0.0:
                return SlaterResult(False, None, -np.inf)
            continue
        nrm2 = float(xi_star @ xi_star)
        ts = [2.0**k for k in range(-30, 31)]
        if nrm2 > 0:
            # per-constraint minimizers of the scalar quadratic along the ray
            ts += [t for t in (-(G @ xi_star) / (beta * nrm2)) if t > 0]
        for t in ts:
            cand = t * xi_star
            mg = margin(cand)
            if mg > best_margin:
                best_xi, best_margin = cand, mg
        if best_margin > tol:
            return SlaterResult(True, best_xi, best_margin)
    return SlaterResult(False, None, best_margin)


def objective_value(problem: QcqpProblem, xi) -> float:
    return problem.objective(xi)


def make_beta(value: float | Callable[[np.ndarray], float]):
    """Normalize a constant or callable into a callable ``beta(theta)``."""
    if callable(value):
        return value
    val = float(value)
    if not val > 0:
        raise ValueError("beta must be strictly positive")
    return lambda theta: val
