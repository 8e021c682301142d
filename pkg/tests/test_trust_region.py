"""Trust-region step: surrogate math, conjugate gradient, acceptance contract."""

from __future__ import annotations

import numpy as np
import pytest
from _oracles import assert_grad_matches_fd

from costimit.nets import CategoricalPolicy, GaussianPolicy, fisher_vector_product
from costimit.params import ParamVector
from costimit.trust_region import (
    StepReport,
    SurrogateBatch,
    SurrogateOverflowError,
    SurrogateSpec,
    TrustRegionConfig,
    combined_advantage,
    conjugate_gradient,
    mean_kl,
    surrogate_gradient,
    surrogate_loss,
    trust_region_step,
)


def random_problem(seed, n=64, head="categorical"):
    rng = np.random.default_rng(seed)
    if head == "categorical":
        policy = CategoricalPolicy(5, (8,), 3, rng=rng)
        states = rng.standard_normal((n, 5))
        actions = rng.integers(0, 3, size=n)
    else:
        policy = GaussianPolicy(5, (8,), 2, rng=rng)
        states = rng.standard_normal((n, 5))
        actions = rng.standard_normal((n, 2))
    logp_old = policy.logp(states, actions)
    batch = SurrogateBatch(
        states=states,
        actions=actions,
        logp_old=logp_old,
        adv_reward=rng.standard_normal(n),
        adv_cost=rng.standard_normal(n),
    )
    return policy, batch, rng


# -- surrogate ------------------------------------------------------------------


def test_surrogate_at_snapshot_equals_mean_advantage():
    policy, batch, _ = random_problem(0)
    spec = SurrogateSpec(mode="penalized", lam=0.3)
    value = surrogate_loss(policy, policy.clone(), batch, spec)
    assert value == pytest.approx(np.mean(batch.adv_reward - 0.3 * batch.adv_cost), rel=1e-12)


def test_surrogate_modes():
    _, batch, _ = random_problem(1)
    assert np.array_equal(
        combined_advantage(batch, SurrogateSpec(mode="reward-only", lam=9.0)),
        batch.adv_reward,
    )
    assert np.array_equal(
        combined_advantage(batch, SurrogateSpec(mode="cost-minimizing")), -batch.adv_cost
    )
    with pytest.raises(ValueError):
        SurrogateSpec(mode="mixed")
    with pytest.raises(ValueError):
        SurrogateSpec(mode="penalized", lam=-0.1)


def test_surrogate_gradient_matches_fd():
    for head in ("categorical", "gaussian"):
        policy, batch, rng = random_problem(2, n=24, head=head)
        spec = SurrogateSpec(mode="penalized", lam=0.5, entropy_coef=0.01)
        grad = surrogate_gradient(policy, batch, spec)
        old = policy.clone()
        assert_grad_matches_fd(
            lambda n: surrogate_loss(n, old, batch, spec), policy, grad, rng
        )


def test_surrogate_gradient_linear_in_lambda():
    policy, batch, _ = random_problem(3)
    lams = (0.3, 0.7)
    mid = SurrogateSpec(mode="penalized", lam=(lams[0] + lams[1]) / 2)
    g_lo = surrogate_gradient(policy, batch, SurrogateSpec(mode="penalized", lam=lams[0])).values
    g_hi = surrogate_gradient(policy, batch, SurrogateSpec(mode="penalized", lam=lams[1])).values
    g_mid = surrogate_gradient(policy, batch, mid).values
    lhs = (g_lo + g_hi) / 2
    scale = np.maximum(np.abs(lhs), np.abs(g_mid)).max() + 1e-300
    assert np.max(np.abs(lhs - g_mid)) / scale < 1e-12


def test_surrogate_overflow_guard():
    policy, batch, _ = random_problem(4)
    batch.logp_old = batch.logp_old - 40.0
    with pytest.raises(SurrogateOverflowError):
        surrogate_loss(policy, policy.clone(), batch, SurrogateSpec(mode="reward-only"))


def test_mean_kl_direction():
    policy, batch, _ = random_problem(5)
    other = CategoricalPolicy(5, (8,), 3, rng=np.random.default_rng(99))
    assert mean_kl(policy, other, batch.states) == policy.mean_kl(other, batch.states)
    assert mean_kl(policy, policy.clone(), batch.states) == pytest.approx(0.0, abs=1e-14)


# -- conjugate gradient -----------------------------------------------------------


def random_spd(rng, n):
    m = rng.standard_normal((n, n))
    return m @ m.T + n * np.eye(n)


def test_cg_matches_direct_solve():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = random_spd(rng, 20)
        b = rng.standard_normal(20)
        x, res = conjugate_gradient(lambda w: a @ w, b, iters=60, tol=1e-12)
        direct = np.linalg.solve(a, b)
        assert np.linalg.norm(x - direct) / np.linalg.norm(direct) < 1e-8
        assert res < 1e-10


def test_cg_scale_invariance():
    rng = np.random.default_rng(7)
    a = random_spd(rng, 12)
    b = rng.standard_normal(12)
    x1, _ = conjugate_gradient(lambda w: a @ w, b, iters=40, tol=1e-12)
    c = 137.0
    x2, _ = conjugate_gradient(lambda w: c * (a @ w), c * b, iters=40, tol=1e-12)
    assert np.allclose(x1, x2, rtol=1e-10, atol=1e-12)


def test_cg_zero_rhs():
    x, res = conjugate_gradient(lambda w: w, np.zeros(5))
    assert np.all(x == 0.0) and res == 0.0


# -- trust-region step -------------------------------------------------------------


def test_step_accepts_with_kl_and_improvement_contract():
    cfg = TrustRegionConfig()
    accepted = 0
    for seed in range(25):
        policy, batch, _ = random_problem(100 + seed, n=48)
        old = policy.clone()
        report = trust_region_step(policy, batch, SurrogateSpec(mode="reward-only"), cfg)
        if report.accepted:
            accepted += 1
            assert report.kl <= 1.5 * cfg.max_kl + 1e-12
            assert report.surrogate_after - report.surrogate_before > 0
            assert policy.mean_kl(old, batch.states) == pytest.approx(report.kl)
        else:
            assert np.array_equal(policy.params.values, old.params.values)
    assert accepted >= 20  # random well-scaled problems nearly always accept


def test_full_step_natural_norm_is_trust_radius():
    cfg = TrustRegionConfig()
    policy, batch, _ = random_problem(200, n=64)
    old = policy.clone()
    report = trust_region_step(policy, batch, SurrogateSpec(mode="reward-only"), cfg)
    assert report.accepted and report.backtracks == 0
    delta = policy.params.values - old.params.values
    v = ParamVector(delta, old.params.manifest)
    hv = fisher_vector_product(old, batch.states, v, cfg.damping)
    assert float(delta @ hv.values) == pytest.approx(2 * cfg.max_kl, rel=1e-9)


def test_zero_advantage_leaves_parameters_unchanged():
    policy, batch, _ = random_problem(8)
    batch.adv_reward[:] = 0.0
    before = policy.params.values.copy()
    report = trust_region_step(policy, batch, SurrogateSpec(mode="reward-only"))
    assert not report.accepted and report.reason == "zero gradient"
    assert np.array_equal(policy.params.values, before)


def test_rejection_restores_parameters():
    policy, batch, _ = random_problem(9)
    before = policy.params.values.copy()
    cfg = TrustRegionConfig(kl_slack=0.0, max_backtracks=3)  # impossible acceptance
    report = trust_region_step(policy, batch, SurrogateSpec(mode="reward-only"), cfg)
    assert not report.accepted
    assert report.backtracks == 4
    assert np.array_equal(policy.params.values, before)


def test_step_report_fields_populated():
    policy, batch, _ = random_problem(10)
    report = trust_region_step(policy, batch, SurrogateSpec(mode="penalized", lam=0.2))
    assert isinstance(report, StepReport)
    assert report.cg_residual >= 0.0
    assert np.isfinite(report.surrogate_before)
