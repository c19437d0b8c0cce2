"""Cart-pole with a wall constraint on the cart position, desk scale."""

import numpy as np

from rsgf.config import build_env, build_policy, preset
from rsgf.train import train

cfg = preset("cartpole-desk")
env = build_env(cfg.env)
res = train(cfg.train, env, build_policy(cfg.policy, env))
v0 = [r["v0_hat"] for r in res.rows]
print(f"{len(res.rows)} updates, V0 estimate {v0[0]:.2f} -> {v0[-1]:.2f}")
print(f"V1 estimate <= 0 at {np.mean([r['v1_hat'] <= 0 for r in res.rows]):.0%} of updates")
