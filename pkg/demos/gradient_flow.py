"""Deterministic safe gradient flow on the analytic fixtures.

Feasible starts never leave the feasible set; infeasible starts are pulled
back in, after which the iterates settle at a KKT point.
"""

import numpy as np

from rsgf.flow import get_fixture, integrate, kkt_check, max_stepsize

for name, alpha, start in [("disk", 1.0, (0.0, 0.0)), ("disk", 1.0, (2.0, 2.0)),
                           ("quadratic", 0.2, (0.0, 0.0)), ("rosenbrock", 1.0, (1.5, -1.5))]:
    p = get_fixture(name)
    h = 0.5 * max_stepsize(alpha, 1.0, p.lipschitz)
    if p.objective_lipschitz > 0:
        h = min(h, 0.5 / p.objective_lipschitz)
    tr = integrate(p, start, alpha, 1.0, h, iters=5000)
    viol = np.max(np.asarray(tr.constraint_values), axis=1)
    first = int(np.argmax(viol <= 1e-6))
    print(f"{name:10s} start {start}: final {np.round(tr.final, 4)}, "
          f"max violation after step {first} = {viol[first:].max():.1e}, "
          f"KKT residual {kkt_check(p, tr.final).residual:.1e}")
