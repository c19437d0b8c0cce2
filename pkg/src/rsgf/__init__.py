"""Safe policy optimization by stochastic safe gradient flow.

Submodules: ``qcqp`` (direction subproblem), ``flow`` (deterministic flow
on analytic problems), ``mdp`` and ``envs`` (environments and rollouts),
``policy`` (RBF-Gaussian policies), ``estimate`` (importance-sampled
estimators), ``certify`` (safety certificates), ``train`` (training loop),
``config`` and ``cli`` (declarative runs).
"""

__version__ = "0.1.0"
