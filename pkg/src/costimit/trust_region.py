"""KL-constrained natural-gradient policy step with backtracking line search.

The surrogate is the importance-weighted advantage mean plus an optional
entropy bonus; its gradient under the damped Fisher metric gives the step
direction via conjugate gradient, scaled so the quadratic model sits exactly
on the trust-region boundary, then backtracked until the true KL and the
surrogate both accept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import fisher_vector_product
from .params import ParamVector

LOGP_GAP_LIMIT = 30.0  # beyond this the importance ratios are garbage

SURROGATE_MODES = ("penalized", "reward-only", "cost-minimizing")


class SurrogateOverflowError(RuntimeError):
    """Importance ratios too large to trust (log-prob gap above the limit)."""


@dataclass(frozen=True)
class SurrogateSpec:
    """Which advantage combination the step maximizes.

    penalized:        A_reward - lambda * A_cost
    reward-only:      A_reward
    cost-minimizing:  -A_cost  (maximizing this minimizes expected cost)
    """

    mode: str = "penalized"
    lam: float = 0.0
    entropy_coef: float = 0.0

    def __post_init__(self):
        if self.mode not in SURROGATE_MODES:
            raise ValueError(f"unknown surrogate mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class TrustRegionConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_tol: float = 1e-10
    damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    kl_slack: float = 1.5  # accept while KL <= kl_slack * max_kl


@dataclass
class SurrogateBatch:
    """States, actions, snapshot log-probs, and both advantage channels."""

    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    adv_reward: np.ndarray
    adv_cost: np.ndarray


@dataclass
class StepReport:
    accepted: bool
    kl: float
    surrogate_before: float
    surrogate_after: float
    backtracks: int
    cg_residual: float
    reason: str = ""


def combined_advantage(batch: SurrogateBatch, spec: SurrogateSpec) -> np.ndarray:
    if spec.mode == "penalized":
        return batch.adv_reward - spec.lam * batch.adv_cost
    if spec.mode == "reward-only":
        return batch.adv_reward
    return -batch.adv_cost


def surrogate_loss(policy, policy_old, batch: SurrogateBatch, spec: SurrogateSpec) -> float:
    """Importance-weighted advantage mean plus entropy bonus, to be maximized."""
    logp = policy.logp(batch.states, batch.actions)
    gap = logp - batch.logp_old
    if np.max(np.abs(gap)) > LOGP_GAP_LIMIT:
        raise SurrogateOverflowError(f"log-prob gap {np.max(np.abs(gap)):.1f} exceeds limit")
    ratio = np.exp(gap)
    value = float(np.mean(ratio * combined_advantage(batch, spec)))
    if spec.entropy_coef:
        value += spec.entropy_coef * policy.entropy(batch.states)
    return value


def surrogate_gradient(policy, batch: SurrogateBatch, spec: SurrogateSpec) -> ParamVector:
    """Gradient at the snapshot point, where every ratio is 1."""
    adv = combined_advantage(batch, spec)
    grad = policy.weighted_logp_grad(batch.states, batch.actions, adv / len(adv))
    if spec.entropy_coef:
        grad.values += spec.entropy_coef * policy.entropy_grad(batch.states).values
    return grad


def mean_kl(policy, policy_old, states: np.ndarray) -> float:
    """Mean over states of KL(policy || policy_old)."""
    return policy.mean_kl(policy_old, states)


def conjugate_gradient(matvec, b: np.ndarray, iters: int = 10, tol: float = 1e-10
                       ) -> tuple[np.ndarray, float]:
    """Solve A x = b for SPD A; stops on relative residual <= tol.

    Returns (x, final relative residual).  Scaling (A, b) -> (cA, cb) leaves
    the solution unchanged.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0.0
    rs = float(r @ r)
    for _ in range(iters):
        if np.sqrt(rs) / b_norm <= tol:
            break
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, float(np.sqrt(rs) / b_norm)


def trust_region_step(policy, batch: SurrogateBatch, spec: SurrogateSpec,
                      cfg: TrustRegionConfig = TrustRegionConfig()) -> StepReport:
    """One KL-constrained ascent step on the surrogate; mutates the policy.

    The policy's current parameters are the snapshot: batch.logp_old must have
    been computed from them.  On rejection the parameters are restored.
    """
    base = policy.params.values.copy()
    old = policy.clone()
    surrogate_before = surrogate_loss(policy, old, batch, spec)

    grad = surrogate_gradient(policy, batch, spec)
    if not np.all(np.isfinite(grad.values)):
        return StepReport(False, 0.0, surrogate_before, surrogate_before, 0, 0.0,
                          reason="non-finite gradient")
    if np.max(np.abs(grad.values)) < 1e-12:
        return StepReport(False, 0.0, surrogate_before, surrogate_before, 0, 0.0,
                          reason="zero gradient")

    def matvec(w: np.ndarray) -> np.ndarray:
        v = ParamVector(w, policy.params.manifest)
        return fisher_vector_product(policy, batch.states, v, cfg.damping).values

    direction, residual = conjugate_gradient(matvec, grad.values, cfg.cg_iters, cfg.cg_tol)
    shs = float(direction @ matvec(direction))
    if shs <= 0 or not np.isfinite(shs):
        return StepReport(False, 0.0, surrogate_before, surrogate_before, 0, residual,
                          reason="non-positive curvature")
    full_step = np.sqrt(2.0 * cfg.max_kl / shs) * direction

    scale = 1.0
    for backtracks in range(cfg.max_backtracks + 1):
        policy.set_values(base + scale * full_step)
        try:
            surrogate_after = surrogate_loss(policy, old, batch, spec)
            kl = policy.mean_kl(old, batch.states)
        except SurrogateOverflowError:
            scale *= cfg.backtrack_ratio
            continue
        if np.isfinite(surrogate_after) and np.isfinite(kl) \
                and kl <= cfg.kl_slack * cfg.max_kl and surrogate_after > surrogate_before:
            return StepReport(True, float(kl), surrogate_before, float(surrogate_after),
                              backtracks, residual)
        scale *= cfg.backtrack_ratio

    policy.set_values(base)
    return StepReport(False, 0.0, surrogate_before, surrogate_before,
                      cfg.max_backtracks + 1, residual, reason="line search exhausted")
