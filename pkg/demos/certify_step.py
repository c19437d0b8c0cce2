"""How many episodes make a step safe with a given confidence?

The margin measures how far a step stays from the constraint boundary; the
episode count then follows from Hoeffding-type bounds on the estimators.
"""

import numpy as np

from rsgf.certify import (achieved_delta, bounding_lipschitz, episodes_required, horizon_confidence,
                          lipschitz_L_j, margin)
from rsgf.estimate import estimate_bundle, stat_constants
from rsgf.flow import max_stepsize
from rsgf.mdp import default_tabular, oracle_value, rollout_batch
from rsgf.qcqp import build_subproblem, solve

# small worked case
req = episodes_required(0.85455, 0.1, 1.75)
print("worked case: episodes needed =", req["min_batch_on_policy_only"])
print("confidence of 10 certified steps at delta = 0.01:", horizon_confidence(1, 10, 0.01))

# one step on the tabular problem
spec, pol = default_tabular(np.array([-1.0, -1.0]))
b = pol.lipschitz_bounds()
L1 = lipschitz_L_j(float(spec.reward_bounds[1]), b.score_lipschitz, b.score_bound, spec.gamma, spec.horizon)
c = stat_constants(1, float(spec.reward_bounds[1]), 0.0, spec.gamma, spec.horizon, pol.nu, b.score_bound)
h = 0.5 * max_stepsize(1.0, 1.0, [L1, bounding_lipschitz(25.0)])

est = estimate_bundle(rollout_batch(spec, pol, 2000, seed=0), pol, spec.gamma)
sol = solve(build_subproblem(pol.theta, est, 1.0, 1.0, 25.0))
M = margin(est.values[0], 1.0, h, 1.0, L1, float(np.linalg.norm(sol.xi)))
J = episodes_required(M, 0.1, c.phi_j, psi=c.psi_j, d=pol.dim)["min_batch_on_policy_only"]
print(f"\nestimated V1 = {est.values[0]:.4f}, margin = {M:.4f}, episodes for delta = 0.1: {J}")
print(f"delta reached with 2000 episodes: {achieved_delta(M, 2000, 2000, 0, c.phi_j, 0.0, c.psi_j, 0.0, pol.dim):.3g}")
after = oracle_value(spec, pol.with_theta(pol.theta + h * sol.xi), 1)
print(f"true V1 after the step: {after:.4f}")
