"""Gaussian policies with RBF-kernel means, truncated to an action box.

The mean is ``mu(s) = sum_i tanh(theta_i) * exp(-||s - c_i||^2 / (2 sigma^2))``
with ``tanh`` applied per action component. Actions follow a diagonal Gaussian
around ``mu(s)`` renormalized over the box, which gives a strictly positive
density floor.

Bound derivation shipped with :meth:`RbfGaussianPolicy.lipschitz_bounds`
(per action component ``l``, box width ``w_l``, action variance ``v_l``,
``K`` a bound on ``sup_s sum_i k_i(s)``):

* score component ``d chi / d theta_il = k_i(s) sech^2(theta_il) (a_l - m_l) / v_l``
  where ``m_l`` is the truncated mean; both ``a_l`` and ``m_l`` lie in the box,
  so ``|score| <= w_l / v_l``.
* ``d m_l / d mu_l = Var_trunc / v_l`` and ``Var_trunc <= min(v_l, w_l^2 / 4)``,
  ``|d sech^2 / dx| <= 4 / (3 sqrt 3)``, and ``sum_i k_i^2 <= K``; the Hessian of
  ``chi`` is block diagonal over ``l`` with blocks ``D + c w w^T``, giving
  ``L = max_l [0.7698 w_l / v_l + min(1/v_l, w_l^2 / (4 v_l^2)) K]``.
* ``||grad chi||^2 <= K sum_l (w_l / v_l)^2`` gives the log-density Lipschitz
  constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtri_exp

__all__ = [
    "RbfGaussianPolicy",
    "DiscretizedRbfPolicy",
    "PolicyBounds",
    "grid_centers",
    "kernel_sum_bound",
    "load_policy",
]

CHECKPOINT_FORMAT = "rsgf-policy"
CHECKPOINT_VERSION = 1
_SECH2_SLOPE = 4.0 / (3.0 * np.sqrt(3.0))
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _log_phi(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def _mirror(alpha, beta):
    """Map [alpha, beta] to an interval centred left of zero, where log_ndtr is accurate."""
    flip = alpha + beta > 0
    a = np.where(flip, -beta, alpha)
    b = np.where(flip, -alpha, beta)
    return a, b, flip


def _log_mass(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) for alpha < beta, stable in both tails."""
    a, b, _ = _mirror(alpha, beta)
    la, lb = log_ndtr(a), log_ndtr(b)
    return lb + np.log1p(-np.exp(la - lb))


def _truncnorm_ppf(u, alpha, beta):
    """Standardized truncated-normal quantile via inverse CDF in log space."""
    a, b, flip = _mirror(alpha, beta)
    la = log_ndtr(a)
    log_mass = _log_mass(a, b)
    with np.errstate(divide="ignore"):
        logu = np.log(u)
    # mirrored draws use the complementary uniform so that u -> x stays monotone
    with np.errstate(divide="ignore"):
        logv = np.where(flip, np.log1p(-u), logu)
    x = ndtri_exp(np.logaddexp(la, logv + log_mass))
    x = np.clip(x, a, b)
    return np.where(flip, -x, x)


def grid_centers(low, high, counts) -> np.ndarray:
    """Evenly spaced grid of centers over a box, one axis per state dimension."""
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(low, high, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def kernel_sum_bound(centers, rbf_variance: float) -> float:
    """Upper bound on ``sup_s sum_i exp(-||s - c_i||^2 / (2 sigma^2))``.

    For a regular grid of centers the sum factorizes over axes and each axis
    is dominated by the infinite lattice theta sum, maximal at a lattice point.
    Otherwise the trivial bound ``N_c`` is returned.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n_c = centers.shape[0]
    bound = 1.0
    for k in range(centers.shape[1]):
        vals = np.unique(centers[:, k])
        if len(vals) == 1:
            continue
        steps = np.diff(vals)
        if not np.allclose(steps, steps[0], rtol=1e-9):
            return float(n_c)
        m = np.arange(1, len(vals))
        bound *= 1.0 + 2.0 * np.sum(np.exp(-((m * steps[0]) ** 2) / (2.0 * rbf_variance)))
    counts = np.prod([len(np.unique(centers[:, k])) for k in range(centers.shape[1])])
    if counts != n_c:
        return float(n_c)
    return float(min(bound, n_c))


@dataclass(frozen=True)
class PolicyBounds:
    score_lipschitz: float  # L
    score_bound: float  # B_tilde
    log_density_lipschitz: float  # L_tilde


class RbfGaussianPolicy:
    """Truncated Gaussian policy with RBF mean.

    Parameters
    ----------
    centers : array of shape (n_centers, state_dim)
    rbf_variance : float
        Kernel width ``sigma^2``.
    action_var : float or array of shape (action_dim,)
        Diagonal of the action covariance.
    action_low, action_high : arrays of shape (action_dim,)
        Truncation box.
    theta : array, optional
        Parameters, shape (n_centers, action_dim) or flat. Defaults to zeros.
    kernel_bound : float, optional
        Bound on the kernel sum used by certificates; computed if omitted.
    """

    def __init__(self, centers, rbf_variance, action_var, action_low, action_high, theta=None, kernel_bound=None):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.rbf_variance = float(rbf_variance)
        self.action_low = np.atleast_1d(np.asarray(action_low, dtype=float))
        self.action_high = np.atleast_1d(np.asarray(action_high, dtype=float))
        self.action_dim = self.action_low.size
        self.action_var = np.broadcast_to(np.asarray(action_var, dtype=float), (self.action_dim,)).copy()
        if self.rbf_variance <= 0 or np.any(self.action_var <= 0):
            raise ValueError("variances must be positive")
        if np.any(self.action_high <= self.action_low):
            raise ValueError("action box must have positive width")
        self._action_std = np.sqrt(self.action_var)
        self._centers_sq = np.sum(self.centers**2, axis=1)
        self.kernel_bound = (
            kernel_sum_bound(self.centers, self.rbf_variance) if kernel_bound is None else float(kernel_bound)
        )
        if theta is None:
            theta = np.zeros(self.n_centers * self.action_dim)
        self.theta = theta

    # -- parameters -----------------------------------------------------
    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]

    @property
    def state_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def dim(self) -> int:
        return self.n_centers * self.action_dim

    @property
    def theta(self) -> np.ndarray:
        return self._theta.ravel()

    @theta.setter
    def theta(self, value):
        value = np.asarray(value, dtype=float)
        if value.size != self.dim:
            raise ValueError(f"theta must have {self.dim} entries, got {value.size}")
        self._theta = value.reshape(self.n_centers, self.action_dim).copy()

    def with_theta(self, theta) -> "RbfGaussianPolicy":
        return RbfGaussianPolicy(
            self.centers, self.rbf_variance, self.action_var, self.action_low, self.action_high,
            theta=theta, kernel_bound=self.kernel_bound,
        )

    @property
    def noise_dim(self) -> int:
        return self.action_dim

    # -- evaluation -----------------------------------------------------
    def kernels(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        sq = np.sum(s**2, axis=1)[:, None] - 2.0 * s @ self.centers.T + self._centers_sq[None, :]
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * self.rbf_variance))

    def mean(self, s) -> np.ndarray:
        single = np.ndim(s) == 1
        mu = self.kernels(s) @ np.tanh(self._theta)
        return mu[0] if single else mu

    def _standardized(self, s):
        mu = self.kernels(s) @ np.tanh(self._theta)
        alpha = (self.action_low - mu) / self._action_std
        beta = (self.action_high - mu) / self._action_std
        return mu, alpha, beta

    def log_prob(self, a, s):
        """Log density of action ``a`` at state ``s`` (batched over leading axis)."""
        single = np.ndim(s) == 1
        a = np.atleast_2d(np.asarray(a, dtype=float))
        self._check_box(a)
        mu, alpha, beta = self._standardized(s)
        z = (a - mu) / self._action_std
        lp = _log_phi(z) - np.log(self._action_std) - _log_mass(alpha, beta)
        out = lp.sum(axis=1)
        return float(out[0]) if single else out

    def grad_log_prob(self, a, s):
        """Score ``grad_theta log pi(a|s)``, flattened like ``theta``."""
        single = np.ndim(s) == 1
        a = np.atleast_2d(np.asarray(a, dtype=float))
        self._check_box(a)
        k = self.kernels(s)
        mu = k @ np.tanh(self._theta)
        alpha = (self.action_low - mu) / self._action_std
        beta = (self.action_high - mu) / self._action_std
        log_z = _log_mass(alpha, beta)
        dlogz = (np.exp(_log_phi(alpha) - log_z) - np.exp(_log_phi(beta) - log_z)) / self._action_std
        dmu = (a - mu) / self.action_var - dlogz  # (n, da)
        sech2 = 1.0 - np.tanh(self._theta) ** 2  # (nc, da)
        grad = k[:, :, None] * sech2[None, :, :] * dmu[:, None, :]
        grad = grad.reshape(grad.shape[0], -1)
        return grad[0] if single else grad

    def sample(self, s, rng):
        single = np.ndim(s) == 1
        n = 1 if single else np.asarray(s).shape[0]
        u = rng.random((n, self.action_dim))
        a = self.sample_from_uniform(s, u)
        return a[0] if single else a

    def sample_from_uniform(self, s, u):
        """Map uniforms in (0, 1) to truncated-Gaussian actions (inverse CDF)."""
        mu, alpha, beta = self._standardized(s)
        x = _truncnorm_ppf(np.asarray(u, dtype=float), alpha, beta)
        a = mu + self._action_std * x
        return np.clip(a, self.action_low, self.action_high)

    def _check_box(self, a):
        tol = 1e-12 * (1.0 + np.abs(self.action_high - self.action_low))
        if np.any(a < self.action_low - tol) or np.any(a > self.action_high + tol):
            raise ValueError("action outside the policy's action box")

    # -- certificate constants -----------------------------------------
    def lipschitz_bounds(self) -> PolicyBounds:
        width = self.action_high - self.action_low
        ratio = width / self.action_var
        K = self.kernel_bound
        curv = np.minimum(1.0 / self.action_var, width**2 / (4.0 * self.action_var**2))
        L = float(np.max(_SECH2_SLOPE * ratio + curv * K))
        B_tilde = float(np.max(ratio))
        L_tilde = float(np.sqrt(K * np.sum(ratio**2)))
        return PolicyBounds(L, B_tilde, L_tilde)

    @property
    def log_nu(self) -> float:
        """Log of a lower bound on the density over the box, valid for every theta."""
        total = 0.0
        M = self.kernel_bound
        mus = np.unique(np.concatenate([np.linspace(-M, M, 2001), [-M, 0.0, M]]))
        for l in range(self.action_dim):
            std = self._action_std[l]
            alpha = (self.action_low[l] - mus) / std
            beta = (self.action_high[l] - mus) / std
            log_z = _log_mass(alpha, beta)
            worst = np.minimum(_log_phi(alpha), _log_phi(beta)) - np.log(std) - log_z
            total += float(np.min(worst))
        return total

    @property
    def nu(self) -> float:
        return float(np.exp(self.log_nu))

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": "rbf_gaussian",
            "centers": self.centers.tolist(),
            "rbf_variance": self.rbf_variance,
            "action_var": self.action_var.tolist(),
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "kernel_bound": self.kernel_bound,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RbfGaussianPolicy":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("kind") != "rbf_gaussian":
            raise ValueError("not an RBF policy checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        return cls(
            data["centers"], data["rbf_variance"], data["action_var"], data["action_low"],
            data["action_high"], theta=data["theta"], kernel_bound=data["kernel_bound"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


def load_policy(path):
    data = json.loads(Path(path).read_text())
    if data.get("kind") == "discretized_rbf":
        return DiscretizedRbfPolicy.from_dict(data)
    return RbfGaussianPolicy.from_dict(data)


class DiscretizedRbfPolicy:
    """RBF-Gaussian policy restricted to finite state and action sets.

    States and actions are integer indices mapped to points; the probability
    of action ``k`` is the base log density at ``action_points[k]`` normalized
    over the finite set. Scores are built from the base policy's score so the
    tabular oracle exercises the continuous code path.
    """

    def __init__(self, base: RbfGaussianPolicy, state_points, action_points):
        self.base = base
        self.state_points = np.asarray(state_points, dtype=float).reshape(-1, base.state_dim)
        self.action_points = np.asarray(action_points, dtype=float).reshape(-1, base.action_dim)
        self.n_actions = self.action_points.shape[0]

    @property
    def theta(self):
        return self.base.theta

    @property
    def dim(self):
        return self.base.dim

    @property
    def noise_dim(self):
        return 1

    def with_theta(self, theta) -> "DiscretizedRbfPolicy":
        return DiscretizedRbfPolicy(self.base.with_theta(theta), self.state_points, self.action_points)

    def _all_log_density(self, s_idx):
        pts = self.state_points[s_idx]
        n = pts.shape[0]
        rep_s = np.repeat(pts, self.n_actions, axis=0)
        rep_a = np.tile(self.action_points, (n, 1))
        return self.base.log_prob(rep_a, rep_s).reshape(n, self.n_actions), rep_a, rep_s

    def probs(self, s):
        s_idx = np.atleast_1d(np.asarray(s, dtype=int))
        logd, _, _ = self._all_log_density(s_idx)
        return np.exp(logd - logsumexp(logd, axis=1, keepdims=True))

    def log_prob(self, a, s):
        single = np.ndim(s) == 0
        s_idx = np.atleast_1d(np.asarray(s, dtype=int))
        a_idx = np.atleast_1d(np.asarray(a, dtype=int)).reshape(-1)
        logd, _, _ = self._all_log_density(s_idx)
        lp = logd[np.arange(len(s_idx)), a_idx] - logsumexp(logd, axis=1)
        return float(lp[0]) if single else lp

    def grad_log_prob(self, a, s):
        single = np.ndim(s) == 0
        s_idx = np.atleast_1d(np.asarray(s, dtype=int))
        a_idx = np.atleast_1d(np.asarray(a, dtype=int)).reshape(-1)
        n = len(s_idx)
        logd, rep_a, rep_s = self._all_log_density(s_idx)
        p = np.exp(logd - logsumexp(logd, axis=1, keepdims=True))
        scores = self.base.grad_log_prob(rep_a, rep_s).reshape(n, self.n_actions, -1)
        g = scores[np.arange(n), a_idx] - np.einsum("na,nad->nd", p, scores)
        return g[0] if single else g

    def sample(self, s, rng):
        single = np.ndim(s) == 0
        s_idx = np.atleast_1d(np.asarray(s, dtype=int))
        a = self.sample_from_uniform(s_idx, rng.random((len(s_idx), 1)))
        return int(a[0]) if single else a

    def sample_from_uniform(self, s, u):
        p = self.probs(s)
        cdf = np.cumsum(p, axis=1)
        u = np.asarray(u, dtype=float).reshape(-1, 1)
        return np.minimum(np.sum(cdf <= u * cdf[:, -1:], axis=1), self.n_actions - 1)

    def lipschitz_bounds(self) -> PolicyBounds:
        width = self.action_points.max(axis=0) - self.action_points.min(axis=0)
        v = self.base.action_var
        ratio = width / v
        K = self.base.kernel_bound
        L = float(np.max(_SECH2_SLOPE * ratio + (width**2 / (4.0 * v**2)) * K))
        return PolicyBounds(L, float(np.max(ratio)), float(np.sqrt(K * np.sum(ratio**2))))

    @property
    def log_nu(self) -> float:
        """Probability floor; multi-dimensional action sets must be product grids."""
        M = self.base.kernel_bound
        mus = np.linspace(-M, M, 2001)
        total = 0.0
        for l in range(self.base.action_dim):
            pts = np.unique(self.action_points[:, l])
            logd = -((pts[None, :] - mus[:, None]) ** 2) / (2.0 * self.base.action_var[l])
            logp = logd - logsumexp(logd, axis=1, keepdims=True)
            total += float(np.min(logp))
        return total

    @property
    def nu(self) -> float:
        return float(np.exp(self.log_nu))

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": "discretized_rbf",
            "base": self.base.to_dict(),
            "state_points": self.state_points.tolist(),
            "action_points": self.action_points.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscretizedRbfPolicy":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("kind") != "discretized_rbf":
            raise ValueError("not a discretized RBF policy checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        return cls(RbfGaussianPolicy.from_dict(data["base"]), data["state_points"], data["action_points"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")
