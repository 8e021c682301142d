"""Tests for the shared iteration engine, its dual-variable dynamics, and BC."""

import numpy as np
import pytest

import costimit.learners as learners_mod
from costimit.envs import make_env
from costimit.learners import (
    ALGO_RULES,
    BcResult,
    EngineConfig,
    ExpertAnchor,
    ImitationLearner,
    LagrangianState,
    bc_train,
    build_learner,
    cvag_branch,
    evaluate_policy,
    fit_value_networks,
    meta_lambda_gradient,
    meta_outer_loss,
    split_by_episode,
)
from costimit.nets import CategoricalPolicy, GaussianPolicy, ValueNet
from costimit.params import Adam


def make_expert_pairs(env, n=40, seed=1):
    rng = np.random.default_rng(seed)
    obs = np.zeros((n, env.spec.obs_dim))
    obs[np.arange(n), rng.integers(0, env.spec.obs_dim, n)] = 1.0
    acts = rng.integers(0, 4, n)
    return obs, acts


ANCHOR = ExpertAnchor(mean_return=1.0, mean_cost=2.0, min_cost=1.0)


def make_grid_learner(algo, cfg=None, seed=3):
    env = make_env("grid", seed=0)
    obs, acts = make_expert_pairs(env)
    cfg = cfg or EngineConfig(batch_size=120)
    return build_learner(algo, env, obs, acts, ANCHOR, cfg=cfg, seed=seed, hidden=(16,))


# -- dual variable -----------------------------------------------------------


def test_lambda_plain_step():
    state = LagrangianState(lam=0.01, lr=0.05)
    assert state.update(j_k=4.0, limit=2.0) == pytest.approx(0.11)


def test_lambda_projection():
    state = LagrangianState(lam=0.01, lr=0.05)
    assert state.update(j_k=1.0, limit=2.0) == 0.0


def test_lambda_fixed_point():
    state = LagrangianState(lam=0.37, lr=0.05)
    assert state.update(j_k=5.0, limit=5.0) == 0.37


def test_lambda_nondecreasing_while_violating():
    state = LagrangianState(lam=0.0, lr=0.05)
    trail = [state.lam]
    for j in (3.0, 2.5, 4.0, 2.1, 6.0):
        trail.append(state.update(j_k=j, limit=2.0))
    assert all(b >= a for a, b in zip(trail, trail[1:]))


def test_lambda_adam_mode_first_step():
    state = LagrangianState(lam=0.01, lr=0.05, mode="adam")
    state.update(j_k=4.0, limit=2.0)
    # first bias-corrected Adam step has magnitude lr * g / (|g| + eps)
    assert state.lam == pytest.approx(0.01 + 0.05 * 2.0 / (2.0 + 1e-8))


def test_lambda_rejects_negative_start():
    with pytest.raises(ValueError):
        LagrangianState(lam=-0.1)


def test_expert_anchor_limits():
    anchor = ExpertAnchor.from_episodes([1.0, 1.0, 1.0], [50.0, 52.0, 48.0])
    assert anchor.mean_cost == pytest.approx(50.0)
    assert anchor.min_cost == 48.0
    assert anchor.lgail_limit == pytest.approx(43.2)


# -- meta step ---------------------------------------------------------------


def test_meta_gradient_single_sample():
    assert meta_lambda_gradient([1.0], [1.0], lam=0.0) == pytest.approx(-2.0)
    # one meta step: 0 - 0.05 * (-2) = 0.1
    assert 0.0 - 0.05 * meta_lambda_gradient([1.0], [1.0], 0.0) == pytest.approx(0.1)


def test_meta_gradient_zero_cost():
    assert meta_lambda_gradient([1.0, -2.0, 0.3], [0.0, 0.0, 0.0], lam=0.7) == 0.0


def test_meta_step_descends_quadratic():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.standard_normal(32)
        d = rng.uniform(0.0, 2.0, 32)
        lam = rng.uniform(0.0, 1.0)
        lr = 0.9 / np.mean(d * d)
        grad = meta_lambda_gradient(a, d, lam)
        if abs(grad) < 1e-12:
            continue
        stepped = lam - lr * grad
        assert meta_outer_loss(a, d, stepped) < meta_outer_loss(a, d, lam)


def test_meta_gradient_matches_finite_difference():
    rng = np.random.default_rng(6)
    a = rng.standard_normal(64)
    d = rng.uniform(0.0, 2.0, 64)
    lam, h = 0.4, 1e-6
    fd = (meta_outer_loss(a, d, lam + h) - meta_outer_loss(a, d, lam - h)) / (2 * h)
    assert meta_lambda_gradient(a, d, lam) == pytest.approx(fd, rel=1e-8)


# -- branch selection ----------------------------------------------------------


def test_cvag_branch_examples():
    assert cvag_branch(10.0, 20.0) == "reward-only"
    assert cvag_branch(20.0, 20.0) == "reward-only"  # inclusive
    assert cvag_branch(30.0, 20.0) == "cost-minimizing"


def test_cvag_branch_pure_function_fuzz():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        j_k, j_e = rng.uniform(-5, 50, 2)
        branch = cvag_branch(j_k, j_e)
        assert branch == ("reward-only" if j_k <= j_e else "cost-minimizing")


# -- episode split -------------------------------------------------------------


def test_split_prefers_episode_boundary():
    dones = np.zeros(10)
    dones[[2, 6]] = 1.0  # boundaries after steps 2 and 6 -> cuts at 3 and 7
    tr, va = split_by_episode(dones, 0.7)
    assert (tr, va) == (slice(0, 7), slice(7, 10))


def test_split_falls_back_to_plain_cut():
    tr, va = split_by_episode(np.zeros(10), 0.7)
    assert (tr, va) == (slice(0, 7), slice(7, 10))
    # a done on the last step is not an interior boundary
    dones = np.zeros(10)
    dones[-1] = 1.0
    assert split_by_episode(dones, 0.7) == (slice(0, 7), slice(7, 10))


def test_split_sides_nonempty():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        dones = (rng.random(n) < 0.3).astype(float)
        tr, va = split_by_episode(dones, 0.7)
        assert tr.stop - tr.start > 0
        assert va.stop - va.start > 0
        assert (tr.start, tr.stop, va.stop) == (0, va.start, n)


# -- value fitting ---------------------------------------------------------------


def test_value_fit_zero_gradient_when_targets_match():
    rng = np.random.default_rng(9)
    net_r = ValueNet(3, (8,), rng=rng)
    net_d = ValueNet(3, (8,), rng=rng)
    obs = rng.standard_normal((20, 3))
    before_r = net_r.params.values.copy()
    before_d = net_d.params.values.copy()
    fit_value_networks(obs, net_r.value(obs), net_d.value(obs),
                       net_r, net_d, Adam(lr=1e-3), Adam(lr=1e-3))
    assert np.array_equal(net_r.params.values, before_r)
    assert np.array_equal(net_d.params.values, before_d)


def test_value_fit_descends():
    rng = np.random.default_rng(10)
    net_r = ValueNet(3, (8,), rng=rng)
    net_d = ValueNet(3, (8,), rng=rng)
    obs = rng.standard_normal((40, 3))
    t_r = rng.standard_normal(40)
    t_d = rng.standard_normal(40)
    loss_r, loss_d = fit_value_networks(obs, t_r, t_d, net_r, net_d,
                                        Adam(lr=1e-3), Adam(lr=1e-3))
    after_r = float(np.mean((net_r.value(obs) - t_r) ** 2))
    after_d = float(np.mean((net_d.value(obs) - t_d) ** 2))
    assert after_r < loss_r
    assert after_d < loss_d


def test_value_fit_bias_moves_toward_constant_target():
    rng = np.random.default_rng(11)
    net = ValueNet(2, (4,), rng=rng)
    other = net.clone()
    obs = rng.standard_normal((10, 2))
    start = float(net.value(obs).mean())
    target = np.full(10, start + 5.0)
    fit_value_networks(obs, target, target, net, other, Adam(lr=1e-2), Adam(lr=1e-2))
    assert float(net.value(obs).mean()) > start


# -- engine iterations --------------------------------------------------------


def test_iteration_contract():
    lrn = make_grid_learner("ccil")
    record = lrn.run_iteration()
    assert record.iteration == 1
    assert record.steps == 120
    assert record.kl <= 1.5 * 0.01 + 1e-12
    assert 0 <= record.accepted_passes <= 3
    assert np.all(np.isfinite(lrn.policy.params.values))
    assert np.all(np.isfinite(lrn.disc.params.values))


def test_surrogate_uses_pre_update_lambda():
    lrn = make_grid_learner("ccil")
    r1 = lrn.run_iteration()
    assert r1.lam == 0.01
    expected = max(0.0, 0.01 + 0.05 * (r1.mean_cost - ANCHOR.mean_cost))
    assert lrn.lagrange.lam == pytest.approx(expected)
    r2 = lrn.run_iteration()
    assert r2.lam == pytest.approx(expected)


def test_gail_lambda_pinned_at_zero():
    lrn = make_grid_learner("gail", EngineConfig(batch_size=120, lagrange_init=0.5))
    for _ in range(2):
        record = lrn.run_iteration()
        assert record.lam == 0.0
    assert lrn.lagrange.lam == 0.0


def test_gail_matches_degenerate_penalized_engine():
    gail = make_grid_learner("gail")
    ccil = make_grid_learner("ccil", EngineConfig(
        batch_size=120, lagrange_init=0.0, lagrange_lr=0.0, zero_cost_channel=True))
    for _ in range(3):
        gail.run_iteration()
        ccil.run_iteration()
    assert np.array_equal(gail.policy.params.values, ccil.policy.params.values)
    assert np.array_equal(gail.disc.params.values, ccil.disc.params.values)
    assert np.array_equal(gail.value_r.params.values, ccil.value_r.params.values)
    assert np.array_equal(gail.value_d.params.values, ccil.value_d.params.values)


def test_lgail_with_expert_limit_matches_ccil():
    lgail = make_grid_learner("lgail", EngineConfig(batch_size=120,
                                                    limit_override=ANCHOR.mean_cost))
    ccil = make_grid_learner("ccil")
    for _ in range(3):
        lgail.run_iteration()
        ccil.run_iteration()
    assert np.array_equal(lgail.policy.params.values, ccil.policy.params.values)


def test_lgail_default_limit_is_discounted_minimum():
    lrn = make_grid_learner("lgail")
    assert lrn.limit == pytest.approx(0.9 * ANCHOR.min_cost)


def test_cvag_branch_wiring():
    high = make_grid_learner("cvag", EngineConfig(batch_size=120, limit_override=1e6))
    assert high.run_iteration().surrogate_mode == "reward-only"
    low = make_grid_learner("cvag", EngineConfig(batch_size=120, limit_override=-1.0))
    assert low.run_iteration().surrogate_mode == "cost-minimizing"


def test_malm_meta_step_changes_lambda():
    malm = make_grid_learner("malm")
    ccil = make_grid_learner("ccil")
    r_m = malm.run_iteration()
    r_c = ccil.run_iteration()
    # identical seeds and data, so the plain dual part agrees; only the meta
    # step separates them
    assert r_m.mean_cost == r_c.mean_cost
    plain = max(0.0, 0.01 + 0.05 * (r_c.mean_cost - ANCHOR.mean_cost))
    assert ccil.lagrange.lam == pytest.approx(plain)
    assert malm.lagrange.lam != pytest.approx(plain)
    assert malm.lagrange.lam >= 0.0


def test_rollback_on_error(monkeypatch):
    lrn = make_grid_learner("ccil")
    lrn.run_iteration()
    snap = lrn._snapshot()

    def boom(*args, **kwargs):
        raise RuntimeError("forced failure")

    monkeypatch.setattr(learners_mod, "discriminator_update", boom)
    with pytest.raises(RuntimeError, match="forced failure"):
        lrn.run_iteration()
    now = lrn._snapshot()
    assert np.array_equal(snap["policy"].values, now["policy"].values)
    assert np.array_equal(snap["disc"].values, now["disc"].values)
    np.testing.assert_equal(snap["rng_act"], now["rng_act"])
    np.testing.assert_equal(snap["rng_disc"], now["rng_disc"])
    np.testing.assert_equal(snap["env"], now["env"])
    assert snap["counters"] == now["counters"]
    assert snap["lagrange"] == now["lagrange"]


def test_run_early_stop(monkeypatch):
    lrn = make_grid_learner("ccil")
    good = dict(episodes=2, mean_surrogate_return=0.0, kl=0.0, cost_rate=0.0,
                disc_loss=0.0, surrogate_mode="penalized", accepted_passes=3,
                clip_fraction=0.0, lam=0.0)
    rows = iter(range(1, 100))

    def fake_iteration():
        i = next(rows)
        return learners_mod.IterationRecord(
            iteration=i, steps=120 * i, mean_true_return=ANCHOR.mean_return,
            mean_cost=ANCHOR.mean_cost - 0.5, **good)

    monkeypatch.setattr(lrn, "run_iteration", fake_iteration)
    records = lrn.run(100, stop_patience=5)
    assert len(records) == 5
    records = lrn.run(7, early_stop=False)
    assert len(records) == 7


def test_unknown_algorithm_rejected():
    env = make_env("grid", seed=0)
    obs, acts = make_expert_pairs(env)
    with pytest.raises(ValueError, match="unknown engine algorithm"):
        build_learner("dagger", env, obs, acts, ANCHOR)


# -- behavioral cloning ---------------------------------------------------------


def test_bc_one_action_dataset():
    rng = np.random.default_rng(12)
    obs = rng.standard_normal((60, 4))
    acts = np.full(60, 2)
    policy = CategoricalPolicy(4, (8,), 3, rng=rng)
    bc_train(policy, obs, acts, rng, epochs=200, lr=0.05)
    assert policy.probs(obs)[:, 2].min() >= 0.99


def test_bc_returns_best_validation_checkpoint():
    rng = np.random.default_rng(13)
    obs = rng.standard_normal((80, 3))
    acts = rng.integers(0, 4, 80)  # pure noise, so validation loss wanders
    policy = CategoricalPolicy(3, (8,), 4, rng=rng)
    result = bc_train(policy, obs, acts, rng, epochs=30, lr=0.02)
    assert isinstance(result, BcResult)
    assert result.best_val_loss <= result.final_val_loss + 1e-12
    assert result.best_val_loss == min(result.val_losses)
    # the returned policy is the best checkpoint, not the last epoch
    va = result.val_losses
    assert len(va) == 30


def test_bc_gaussian_matches_linear_regression_oracle():
    rng = np.random.default_rng(14)
    w = np.array([[0.5, -0.3, 0.2], [0.1, 0.4, -0.2]])
    x = rng.standard_normal((200, 3))
    noise = 0.1 * rng.standard_normal((200, 2))
    a = x @ w.T + noise
    policy = GaussianPolicy(3, (32,), 2, rng=rng)
    bc_train(policy, x, a, rng, epochs=400, lr=5e-3)
    x_fresh = rng.standard_normal((100, 3))
    mse = float(np.mean((policy.mean(x_fresh) - x_fresh @ w.T) ** 2))
    assert mse < 0.01  # below the expert's own action noise variance


def test_bc_rejects_tiny_dataset():
    rng = np.random.default_rng(15)
    policy = CategoricalPolicy(2, (4,), 2, rng=rng)
    with pytest.raises(ValueError, match="at least 10"):
        bc_train(policy, np.zeros((9, 2)), np.zeros(9, dtype=int), rng)


# -- evaluation -----------------------------------------------------------------


def test_evaluate_policy_on_grid():
    rng = np.random.default_rng(16)
    env = make_env("grid", seed=0)
    policy = CategoricalPolicy(env.spec.obs_dim, (8,), 4, rng=rng)
    report = evaluate_policy(policy, env, episodes=3, rng=rng)
    assert report.episode_returns.shape == (3,)
    assert np.all(report.episode_costs == report.episode_costs.astype(int))
    # grid returns are sums of 0.1 progress increments plus a 1.0 bonus
    scaled = report.episode_returns * 10.0
    assert np.allclose(scaled, np.round(scaled))
    assert np.all(report.episode_returns <= 1.8 + 1e-9)
