"""Certificate arithmetic for one stochastic safe-gradient step.

Given the estimates and the step actually taken, these functions say how
many episodes are needed for the next iterate to stay feasible with a
prescribed probability, and what probability the realized batch buys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SafetyCertificate",
    "margin",
    "episodes_required",
    "achieved_delta",
    "lipschitz_L_j",
    "bounding_lipschitz",
    "horizon_confidence",
    "invariance_reward_offset",
    "build_invariance_reward",
    "popoviciu_bound",
    "hoeffding_bound",
    "frechet_lower",
    "theorem3_iteration_bound",
    "iteration_bound",
    "certify_step",
]


def margin(V_hat_j, alpha, h, beta_at_theta, L_j, r_norm) -> float:
    """Error budget below which the next iterate provably keeps ``V_j <= 0``."""
    num = -(1.0 - alpha * h) * V_hat_j + 0.5 * h * (beta_at_theta - L_j * h) * r_norm**2
    return float(num / (1.0 + h * r_norm))


def _value_threshold(M, delta):
    return -(2.0 / M**2) * math.log(delta / 2.0)


def _gradient_threshold(M, delta, d):
    return -(2.0 * d / M**2) * math.log(delta / (2.0 * d))


def episodes_required(M, delta, phi, phi_bar=None, psi=None, psi_bar=None, d=1, mix=1.0) -> dict:
    """Batch-size requirements for a certified step.

    Returns the two ratio thresholds that ``|J|^2 / (N_on a^2 + N_off a_bar^2)``
    must reach, for ``a = phi`` (values) and ``a = psi`` (gradients). For a
    batch with on-policy fraction ``mix`` the smallest ``|J|`` meeting both
    is reported under ``min_batch``; ``min_batch_on_policy_only`` is the
    same with ``mix = 1``. Gradient conditions are skipped when ``psi`` is
    not given.
    """
    if not M > 0:
        raise ValueError("margin nonpositive; the certified-step hypothesis is violated")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not 0 <= mix <= 1:
        raise ValueError("mix must lie in [0, 1]")
    t_val = _value_threshold(M, delta)
    t_grad = _gradient_threshold(M, delta, d) if psi is not None else None

    def smallest(frac):
        # |J|^2 / (|J| (frac a^2 + (1-frac) a_bar^2)) = |J| / s
        need = 0.0
        pairs = [(t_val, phi, phi_bar)]
        if t_grad is not None:
            pairs.append((t_grad, psi, psi_bar))
        for thr, a, a_bar in pairs:
            s = frac * a**2
            if frac < 1:
                if a_bar is None:
                    raise ValueError("off-policy share requires the floor-scaled constants")
                s += (1.0 - frac) * a_bar**2
            need = max(need, thr * s)
        return int(math.ceil(need - 1e-9 * max(need, 1.0)))

    return {
        "value_threshold": t_val,
        "gradient_threshold": t_grad,
        "ratio_conditions": (t_val, t_grad),
        "min_batch_on_policy_only": smallest(1.0),
        "min_batch": smallest(float(mix)),
    }


def achieved_delta(M, J, N_bar, N_tilde, phi, phi_bar, psi=None, psi_bar=None, d=1) -> float:
    """Smallest ``delta`` for which the realized batch meets both ratio conditions."""
    if not M > 0:
        return 1.0
    out = 0.0
    pairs = [(phi, phi_bar, 1)] + ([(psi, psi_bar, d)] if psi is not None else [])
    for a, a_bar, dd in pairs:
        s = N_bar * a**2 + (N_tilde * a_bar**2 if N_tilde else 0.0)
        if s == 0:
            continue
        out = max(out, 2.0 * dd * math.exp(-(M**2) * J**2 / (2.0 * dd * s)))
    return min(out, 1.0)


def lipschitz_L_j(B_j, L, B_tilde, gamma, T) -> float:
    """Lipschitz constant of ``grad V_j`` for the RBF-Gaussian policy class."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    G = (1.0 - gamma**T) / (1.0 - gamma)
    mid = gamma * (1.0 - (T + 1) * gamma**T + T * gamma ** (T + 1)) / (1.0 - gamma) ** 2
    return float(B_j * L * G**2 + 2.0 * B_j * B_tilde**2 * mid + B_j * B_tilde**2 * G**2)


def bounding_lipschitz(C) -> float:
    """Constant used for the ball constraint ``||theta||^2 <= C``."""
    return 2.0 * math.sqrt(C)


def horizon_confidence(q, H, delta) -> float:
    return max(0.0, 1.0 - 2.0 * q * H * delta)


def invariance_reward_offset(gamma, T, delta_j) -> float:
    """Per-step offset making ``V_j <= 0`` equivalent to staying inside the set."""
    return float(gamma**T * delta_j * (1.0 - gamma) / (1.0 - gamma**T))


def build_invariance_reward(set_membership, gamma, T, delta_j):
    """Reward ``1 - 1_C(s) + offset`` for a state-membership predicate."""
    offset = invariance_reward_offset(gamma, T, delta_j)

    def reward(s):
        inside = np.asarray(set_membership(s), dtype=bool)
        return np.where(inside, 0.0, 1.0) + offset

    reward.offset = offset
    return reward


def popoviciu_bound(m, M) -> float:
    if m > M:
        raise ValueError("need m <= M")
    return (M - m) ** 2 / 4.0


def hoeffding_bound(ranges, epsilon) -> float:
    """Upper bound on ``P(|S - E S| >= epsilon)`` for independent bounded summands."""
    ranges = np.asarray(ranges, dtype=float).reshape(-1, 2)
    width = np.sum((ranges[:, 1] - ranges[:, 0]) ** 2)
    if np.any(ranges[:, 1] < ranges[:, 0]):
        raise ValueError("each range needs a <= b")
    if width == 0:
        return 0.0
    return float(2.0 * math.exp(-2.0 * epsilon**2 / width))


def frechet_lower(probs) -> float:
    probs = np.asarray(probs, dtype=float)
    return float(max(0.0, probs.sum() - (len(probs) - 1)))


def iteration_bound(kappa, epsilon, ell_hat, sigma_bar, q, epsilon_star) -> float:
    """Iterations after which the best squared direction norm drops below ``epsilon``."""
    correction = 1.5 * ell_hat * sigma_bar * (q / epsilon_star + 1.0)
    gap = epsilon - correction
    if not gap > 0:
        raise ValueError("variance too large for the bound to apply")
    return float((kappa / gap) ** 2)


theorem3_iteration_bound = iteration_bound


@dataclass
class SafetyCertificate:
    margins: np.ndarray
    value_thresholds: np.ndarray
    gradient_thresholds: np.ndarray
    value_ratios: np.ndarray
    gradient_ratios: np.ndarray
    conditions_met: np.ndarray
    delta: float
    per_constraint_confidence: np.ndarray
    joint_confidence: float
    horizon: int
    horizon_confidence: float
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in [*self.per_constraint_confidence, self.joint_confidence, self.horizon_confidence]:
            if not 0.0 <= p <= 1.0:
                raise ValueError("confidence outside [0, 1]")
        if not np.all(np.isfinite(self.margins)):
            raise ValueError("non-finite margin")


def certify_step(V_hat, r_norm, alpha, h, beta_at_theta, L, constants, N_bar, N_tilde, d, delta, H=1):
    """Assemble the certificate for one step.

    ``constants`` is one ``StatConstants`` per constraint. A constraint
    contributes confidence ``1 - 2 delta`` only when its margin is positive
    and the realized batch meets both ratio conditions; otherwise it
    contributes zero.
    """
    V_hat = np.atleast_1d(np.asarray(V_hat, dtype=float))
    L = np.atleast_1d(np.asarray(L, dtype=float))
    q = len(V_hat)
    J = N_bar + N_tilde
    M = np.array([margin(V_hat[j], alpha, h, beta_at_theta, L[j], r_norm) for j in range(q)])
    tv, tg, rv, rg = (np.full(q, np.nan) for _ in range(4))
    ok = np.zeros(q, dtype=bool)
    for j, c in enumerate(constants):
        sv = N_bar * c.phi_j**2 + (N_tilde * c.phi_bar_j**2 if N_tilde else 0.0)
        sg = N_bar * c.psi_j**2 + (N_tilde * c.psi_bar_j**2 if N_tilde else 0.0)
        rv[j] = J**2 / sv if sv > 0 else np.inf
        rg[j] = J**2 / sg if sg > 0 else np.inf
        if M[j] > 0:
            tv[j] = _value_threshold(M[j], delta)
            tg[j] = _gradient_threshold(M[j], delta, d)
            ok[j] = rv[j] >= tv[j] and rg[j] >= tg[j]
    per = np.where(ok, max(0.0, 1.0 - 2.0 * delta), 0.0)
    joint = max(0.0, 1.0 - 2.0 * q * delta) if ok.all() else 0.0
    hc = horizon_confidence(q, H, delta) if ok.all() else 0.0
    return SafetyCertificate(
        margins=M,
        value_thresholds=tv,
        gradient_thresholds=tg,
        value_ratios=rv,
        gradient_ratios=rg,
        conditions_met=ok,
        delta=float(delta),
        per_constraint_confidence=per,
        joint_confidence=joint,
        horizon=int(H),
        horizon_confidence=hc,
        inputs=dict(V_hat=V_hat.tolist(), r_norm=float(r_norm), alpha=alpha, h=h, beta=beta_at_theta, L=L.tolist(),
                    N_bar=int(N_bar), N_tilde=int(N_tilde), d=int(d)),
    )
