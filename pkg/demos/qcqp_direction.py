"""Direction subproblem: a projection onto an intersection of disks.

Each constraint a_j + g_j.xi + (beta/2)|xi|^2 <= 0 is a disk, so the search
direction is the point of the feasible lens closest to -g0. The dual solver
returns the multipliers, and the direction follows from them in closed form.
"""

import numpy as np

from rsgf.qcqp import QcqpProblem, closed_form_direction, slater_probe, solve

# one constraint active, one slack
prob = QcqpProblem(g0=np.array([3.0, 0.0]), levels=np.array([-0.3, -4.0]),
                   gradients=np.array([[1.0, 0.0], [0.0, 1.0]]), beta=1.0)
sol = solve(prob)
print("status       ", sol.status.value)
print("direction    ", np.round(sol.xi, 6))
print("multipliers  ", np.round(sol.multipliers, 6))
print("active set   ", sol.active_set)
print("KKT residual ", f"{sol.kkt_residual:.1e}")
print("closed form  ", np.round(closed_form_direction(prob.g0, prob.gradients, sol.multipliers, prob.beta), 6))

# far-apart disks: no direction exists and the solver says so instead of guessing
bad = QcqpProblem(g0=np.zeros(2), levels=np.array([0.1, 0.1]),
                  gradients=np.array([[1.0, 0.0], [-1.0, 0.0]]), beta=1.0)
print("\ndisjoint disks:", solve(bad).status.value, "| strictly feasible:", slater_probe(bad).strictly_feasible)

# timing on a batch of random problems
rng = np.random.default_rng(0)
import time

t0 = time.perf_counter()
n_opt = sum(solve(QcqpProblem(rng.normal(size=2), rng.uniform(-2, 0, 2), rng.normal(size=(2, 2)), 1.0)).optimal
            for _ in range(1000))
print(f"\n1000 random problems: {n_opt} optimal in {time.perf_counter() - t0:.2f} s")
