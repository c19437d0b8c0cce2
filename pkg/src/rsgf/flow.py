"""Deterministic safe gradient flow on problems with exact values and gradients.

Forward-Euler steps ``theta <- theta + h xi`` where ``xi`` solves the
direction subproblem built from exact constraint data. Used to check that
feasible sets stay invariant, that infeasible starts are pulled back, and
that iterates approach KKT points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import nnls

from . import qcqp
from .qcqp import QcqpProblem, QcqpSolution, Status

__all__ = [
    "AnalyticProblem",
    "FlowTrace",
    "Schedule",
    "rsgf_map",
    "max_stepsize",
    "integrate",
    "kkt_check",
    "KktReport",
    "disk_fixture",
    "quadratic_fixture",
    "rosenbrock_fixture",
    "FIXTURES",
    "get_fixture",
]

FLOW_TOL = 1e-11

Fn = Callable[[np.ndarray], float]
Grad = Callable[[np.ndarray], np.ndarray]


@dataclass
class AnalyticProblem:
    """``min V_0(theta)`` subject to ``V_j(theta) <= 0`` with closed-form derivatives."""

    name: str
    dim: int
    objective: Fn
    objective_grad: Grad
    constraints: list[Fn]
    constraint_grads: list[Grad]
    lipschitz: list[float]  # of each constraint gradient
    objective_lipschitz: float = math.inf  # local bound near the region of interest
    kkt_points: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def values(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.array([c(theta) for c in self.constraints], dtype=float)

    def gradients(self, theta) -> np.ndarray:
        """``(q+1, d)``, objective first."""
        theta = np.asarray(theta, dtype=float)
        rows = [self.objective_grad(theta)] + [g(theta) for g in self.constraint_grads]
        return np.asarray(rows, dtype=float).reshape(len(rows), self.dim)


@dataclass
class FlowTrace:
    iterates: list[np.ndarray]
    directions: list[np.ndarray]
    multipliers: list[np.ndarray]
    constraint_values: list[np.ndarray]  # one per iterate
    objective_values: list[float]
    kkt_residuals: list[float]  # subproblem residual per direction
    stepsizes: list[float]
    status: str = "completed"
    stopped_at: int | None = None
    point_kkt: list[float] = field(default_factory=list)  # KKT residual of each iterate for the original problem

    def __post_init__(self):
        self.check()

    def check(self):
        n = len(self.directions)
        if len(self.iterates) != n + 1:
            raise ValueError("iterates must be one longer than directions")
        if not (len(self.multipliers) == len(self.kkt_residuals) == len(self.stepsizes) == n):
            raise ValueError("per-step sequences have inconsistent lengths")
        if self.point_kkt and len(self.point_kkt) != n + 1:
            raise ValueError("point_kkt must have one entry per iterate")

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def max_violation(self) -> float:
        return float(max(np.max(v, initial=-np.inf) for v in self.constraint_values))

    def write_csv(self, path) -> None:
        q = len(self.constraint_values[0])
        d = len(self.iterates[0])
        header = (["iteration", "objective"] + [f"v{j + 1}" for j in range(q)]
                  + [f"theta{k}" for k in range(d)] + ["xi_norm", "stepsize", "qcqp_residual", "kkt_residual"])
        with open(path, "w", newline="") as fh:
            fh.write("# schema: rsgf-flow/1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, theta in enumerate(self.iterates):
                if i < len(self.directions):
                    tail = [repr(float(np.linalg.norm(self.directions[i]))), repr(self.stepsizes[i]),
                            repr(self.kkt_residuals[i])]
                else:
                    tail = ["", "", ""]
                kkt = repr(float(self.point_kkt[i])) if self.point_kkt else ""
                w.writerow([i, repr(float(self.objective_values[i]))]
                           + [repr(float(v)) for v in self.constraint_values[i]]
                           + [repr(float(x)) for x in theta] + tail + [kkt])


@dataclass
class Schedule:
    """Stepsize rule ``h_i`` for iteration ``i = 1, 2, ...``.

    kinds: ``constant`` (h), ``inverse_sqrt`` (1 / (alpha sqrt(i))),
    ``harmonic`` (c / i), ``normalized`` (min(h, r / ||xi||)).
    """

    kind: str = "constant"
    h: float = 0.1
    c: float = 1.0
    r: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_sqrt", "harmonic", "normalized"):
            raise ValueError(f"unknown stepsize schedule {self.kind!r}")

    def __call__(self, i: int, xi_norm: float = 0.0) -> float:
        if self.kind == "constant":
            return self.h
        if self.kind == "inverse_sqrt":
            return 1.0 / (self.alpha * math.sqrt(i))
        if self.kind == "harmonic":
            return self.c / i
        return self.h if xi_norm == 0 else min(self.h, self.r / xi_norm)

    @property
    def vanishing(self) -> bool:
        return self.kind in ("inverse_sqrt", "harmonic")


def _beta(beta_fn, theta):
    return float(beta_fn(theta)) if callable(beta_fn) else float(beta_fn)


def rsgf_map(problem: AnalyticProblem, theta, alpha: float, beta_fn=1.0, tol: float = FLOW_TOL,
             u0=None) -> QcqpSolution:
    """Solve the direction subproblem at ``theta`` with exact data."""
    theta = np.asarray(theta, dtype=float)
    grads = problem.gradients(theta)
    levels = alpha * problem.values(theta)
    sub = QcqpProblem(grads[0], levels, grads[1:], _beta(beta_fn, theta))
    return qcqp.solve(sub, tol=tol, u0=u0)


def max_stepsize(alpha: float, beta_at_theta: float, lipschitz: Sequence[float]) -> float:
    """Largest stepsize for which the one-step constraint bound holds."""
    caps = [1.0 / alpha] + [beta_at_theta / L for L in lipschitz if L > 0]
    return float(min(caps))


def integrate(problem: AnalyticProblem, theta0, alpha: float, beta_fn=1.0, schedule=None, iters: int = 1000,
              tol: float = FLOW_TOL, track_kkt: bool = False) -> FlowTrace:
    """Euler integration of the flow; stops early if a subproblem is infeasible.

    With ``track_kkt`` each iterate's KKT residual for the original problem
    is recorded in ``point_kkt``.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    if theta.shape != (problem.dim,):
        raise ValueError(f"theta0 must have shape ({problem.dim},)")
    if schedule is None:
        schedule = Schedule("constant", h=0.5 * max_stepsize(alpha, _beta(beta_fn, theta), problem.lipschitz))
    elif isinstance(schedule, (int, float)):
        schedule = Schedule("constant", h=float(schedule))
    trace = FlowTrace([theta.copy()], [], [], [problem.values(theta)], [float(problem.objective(theta))], [], [])
    if track_kkt:
        trace.point_kkt.append(kkt_check(problem, theta).residual)
    u_prev = None
    for i in range(1, iters + 1):
        sol = rsgf_map(problem, theta, alpha, beta_fn, tol=tol, u0=u_prev)
        if sol.status == Status.INFEASIBLE:
            trace.status, trace.stopped_at = "infeasible", i
            return trace
        xi, u_prev = sol.xi, sol.multipliers
        h = schedule(i, float(np.linalg.norm(xi)))
        theta = theta + h * xi
        vals = problem.values(theta)
        obj = float(problem.objective(theta))
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(vals)) and math.isfinite(obj)):
            raise FloatingPointError(f"non-finite value at iteration {i}")
        trace.iterates.append(theta.copy())
        trace.directions.append(xi)
        trace.multipliers.append(sol.multipliers)
        trace.kkt_residuals.append(sol.kkt_residual)
        trace.stepsizes.append(h)
        trace.constraint_values.append(vals)
        trace.objective_values.append(obj)
        if track_kkt:
            trace.point_kkt.append(kkt_check(problem, theta).residual)
    return trace


@dataclass
class KktReport:
    is_kkt: bool
    residual: float
    multipliers: np.ndarray


def kkt_check(problem: AnalyticProblem, theta, tol: float = 1e-6) -> KktReport:
    """Best nonnegative multipliers for stationarity plus complementarity.

    Solves ``min ||grad V_0 + sum u_j grad V_j||^2 + sum (u_j V_j)^2`` over
    ``u >= 0``; the residual is the largest of the stationarity norm, the
    complementarity products and the primal violation.
    """
    theta = np.asarray(theta, dtype=float)
    grads = problem.gradients(theta)
    vals = problem.values(theta)
    q = len(vals)
    if q == 0:
        u = np.zeros(0)
        stat = float(np.linalg.norm(grads[0]))
        return KktReport(stat <= tol, stat, u)
    A = np.vstack([grads[1:].T, np.diag(vals)])
    b = np.concatenate([-grads[0], np.zeros(q)])
    u, _ = nnls(A, b)
    stat = float(np.linalg.norm(grads[0] + u @ grads[1:]))
    comp = float(np.max(np.abs(u * vals)))
    viol = float(max(0.0, vals.max()))
    res = max(stat, comp, viol)
    return KktReport(res <= tol, res, u)


# -- fixtures ---------------------------------------------------------------------

def disk_fixture() -> AnalyticProblem:
    """Linear objective over the unit disk; one active constraint at the optimum."""
    s = 1.0 / math.sqrt(2.0)
    return AnalyticProblem(
        name="disk",
        dim=2,
        objective=lambda x: float(x[0] + x[1]),
        objective_grad=lambda x: np.array([1.0, 1.0]),
        constraints=[lambda x: float(x @ x - 1.0)],
        constraint_grads=[lambda x: 2.0 * x],
        lipschitz=[2.0],
        objective_lipschitz=0.0,
        kkt_points=[(np.array([-s, -s]), np.array([s]))],
    )


def quadratic_fixture() -> AnalyticProblem:
    """Quadratic pull towards (2, 2) against two curved half-planes; both active."""
    t = (-1.0 + math.sqrt(1.4)) / 0.2
    u = 2.0 * (2.0 - t) / (1.0 + 0.2 * t)
    target = np.array([2.0, 2.0])
    return AnalyticProblem(
        name="quadratic",
        dim=2,
        objective=lambda x: float(np.sum((x - target) ** 2)),
        objective_grad=lambda x: 2.0 * (x - target),
        constraints=[lambda x: float(x[0] + 0.1 * x[1] ** 2 - 1.0), lambda x: float(x[1] + 0.1 * x[0] ** 2 - 1.0)],
        constraint_grads=[lambda x: np.array([1.0, 0.2 * x[1]]), lambda x: np.array([0.2 * x[0], 1.0])],
        lipschitz=[0.2, 0.2],
        objective_lipschitz=2.0,
        kkt_points=[(np.array([t, t]), np.array([u, u]))],
    )



def rosenbrock_fixture(b: float = 10.0) -> AnalyticProblem:
    """Nonconvex Rosenbrock-type valley whose unconstrained minimizer (1, 1) lies outside the unit disk."""

    def f(x):
        return float((1.0 - x[0]) ** 2 + b * (x[1] - x[0] ** 2) ** 2)

    def g(x):
        r = x[1] - x[0] ** 2
        return np.array([-2.0 * (1.0 - x[0]) - 4.0 * b * x[0] * r, 2.0 * b * r])

    return AnalyticProblem(
        name="rosenbrock",
        dim=2,
        objective=f,
        objective_grad=g,
        constraints=[lambda x: float(x @ x - 1.0)],
        constraint_grads=[lambda x: 2.0 * x],
        lipschitz=[2.0],
        objective_lipschitz=14.0 * b,  # Hessian norm bound on the unit disk
        kkt_points=[],
    )


FIXTURES = {"disk": disk_fixture, "quadratic": quadratic_fixture, "rosenbrock": rosenbrock_fixture}


def get_fixture(name: str) -> AnalyticProblem:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
