"""Tests for the tabular occupancy oracle and the saddle objective."""

import math

import numpy as np
import pytest

from costimit.envs import GridHazardSpec
from costimit.oracle import (
    TabularCmdp,
    exact_occupancy,
    flow_residual,
    grid_tabular,
    mc_causal_entropy,
    mc_horizon,
    mc_occupancy,
    occupancy_entropy,
    optimal_discriminator,
    policy_from_occupancy,
    random_policy,
    random_tabular,
    run_oracle_checks,
    saddle_objective,
)


def single_state_mdp(n_actions=2, discount=0.9):
    return TabularCmdp(
        transition=np.ones((1, n_actions, 1)),
        start=np.array([1.0]),
        reward=np.zeros((1, n_actions)),
        cost=np.zeros((1, n_actions)),
        discount=discount,
    )


def test_single_state_uniform_occupancy():
    mdp = single_state_mdp()
    rho = exact_occupancy(mdp, np.array([[0.5, 0.5]]))
    assert rho == pytest.approx(np.array([[5.0, 5.0]]))
    assert rho.sum() == pytest.approx(1.0 / (1.0 - 0.9))


def test_two_state_chain_occupancy():
    # s0 -> s1 (absorbing), single action, gamma = 1/2:
    # mu(s0) = 1, mu(s1) = 1/2 + 1/4 + ... = 1
    transition = np.zeros((2, 1, 2))
    transition[0, 0, 1] = 1.0
    transition[1, 0, 1] = 1.0
    mdp = TabularCmdp(transition, np.array([1.0, 0.0]), np.zeros((2, 1)),
                      np.zeros((2, 1)), 0.5)
    rho = exact_occupancy(mdp, np.ones((2, 1)))
    assert rho == pytest.approx(np.array([[1.0], [1.0]]))


def test_occupancy_invariants_random():
    rng = np.random.default_rng(0)
    for discount in (0.5, 0.9, 0.99):
        mdp = random_tabular(rng, n_states=7, n_actions=3, discount=discount)
        rho = exact_occupancy(mdp, random_policy(rng, 7, 3))
        assert rho.sum() == pytest.approx(1.0 / (1.0 - discount), abs=1e-8)
        assert flow_residual(mdp, rho) < 1e-8
        assert np.all(rho >= 0)


def test_mc_occupancy_matches_exact():
    rng = np.random.default_rng(1)
    mdp = random_tabular(rng, n_states=5, n_actions=3, discount=0.5)
    policy = random_policy(rng, 5, 3)
    rho = exact_occupancy(mdp, policy)
    est, se = mc_occupancy(mdp, policy, rng, episodes=1_000_000)
    assert np.all(np.abs(est - rho) <= 3.0 * se + 1e-12)


def test_policy_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mdp = random_tabular(rng, n_states=6, n_actions=4, discount=0.9)
        policy = random_policy(rng, 6, 4)
        rho = exact_occupancy(mdp, policy)
        recovered = policy_from_occupancy(mdp, rho)
        assert recovered == pytest.approx(policy, abs=1e-10)
        back = exact_occupancy(mdp, recovered)
        assert back == pytest.approx(rho, abs=1e-8)


def test_policy_rows_from_occupancy_shape():
    mdp = single_state_mdp(n_actions=4)
    uniform = np.full((1, 4), 2.5)
    assert policy_from_occupancy(mdp, uniform) == pytest.approx(np.full((1, 4), 0.25))
    peaked = np.array([[10.0, 0.0, 0.0, 0.0]])
    assert policy_from_occupancy(mdp, peaked) == pytest.approx(
        np.array([[1.0, 0.0, 0.0, 0.0]]))


def test_zero_mass_with_flow_demand_rejected():
    transition = np.zeros((2, 1, 2))
    transition[0, 0, 1] = 1.0
    transition[1, 0, 1] = 1.0
    mdp = TabularCmdp(transition, np.array([1.0, 0.0]), np.zeros((2, 1)),
                      np.zeros((2, 1)), 0.5)
    bad = np.array([[1.0], [0.0]])  # state 1 receives flow but holds no mass
    with pytest.raises(ValueError, match="flow demand"):
        policy_from_occupancy(mdp, bad)


def test_dead_state_gets_uniform_row():
    # start mass only on state 0, state 1 unreachable
    transition = np.zeros((2, 2, 2))
    transition[:, :, 0] = 1.0
    mdp = TabularCmdp(transition, np.array([1.0, 0.0]), np.zeros((2, 2)),
                      np.zeros((2, 2)), 0.5)
    rho = exact_occupancy(mdp, np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert rho[1] == pytest.approx([0.0, 0.0])
    policy = policy_from_occupancy(mdp, rho)
    assert policy[1] == pytest.approx([0.5, 0.5])


def test_entropy_closed_form_uniform():
    mdp = single_state_mdp()
    rho = exact_occupancy(mdp, np.array([[0.5, 0.5]]))
    assert occupancy_entropy(rho) == pytest.approx(math.log(2.0) / (1.0 - 0.9))


def test_entropy_zero_for_deterministic():
    assert occupancy_entropy(np.array([[3.0, 0.0], [0.0, 0.0]])) == 0.0


def test_entropy_matches_mc():
    rng = np.random.default_rng(3)
    mdp = random_tabular(rng, n_states=4, n_actions=3, discount=0.5)
    policy = random_policy(rng, 4, 3)
    exact = occupancy_entropy(exact_occupancy(mdp, policy))
    est, se = mc_causal_entropy(mdp, policy, rng, episodes=60_000)
    assert abs(exact - est) <= 3.0 * se


def test_mc_horizon():
    assert mc_horizon(0.5) == 20
    assert mc_horizon(0.9, tail=1e-6) == math.ceil(math.log(1e-6) / math.log(0.9))
    with pytest.raises(ValueError):
        mc_horizon(1.0)


# -- saddle objective ------------------------------------------------------------


def test_saddle_identical_measures():
    rng = np.random.default_rng(4)
    mdp = random_tabular(rng, n_states=5, n_actions=3, discount=0.9)
    rho = exact_occupancy(mdp, random_policy(rng, 5, 3))
    value = saddle_objective(rho, rho, np.full((5, 3), 0.5), 3.7, mdp.cost, 0.9)
    assert value == pytest.approx(2.0 * math.log(0.5), abs=1e-10)


def test_saddle_linear_in_lambda():
    rng = np.random.default_rng(5)
    mdp = random_tabular(rng, n_states=5, n_actions=3, discount=0.9)
    rho_pi = exact_occupancy(mdp, random_policy(rng, 5, 3))
    rho_e = exact_occupancy(mdp, random_policy(rng, 5, 3))
    disc = rng.uniform(0.2, 0.8, (5, 3))
    f = [saddle_objective(rho_pi, rho_e, disc, lam, mdp.cost, 0.9) for lam in (0, 1, 2)]
    assert abs(f[2] - 2.0 * f[1] + f[0]) < 1e-12


def test_saddle_increasing_in_lambda_when_costlier():
    mdp = single_state_mdp(n_actions=2)
    rho_pi = np.array([[9.0, 1.0]])
    rho_e = np.array([[1.0, 9.0]])
    cost = np.array([[1.0, 0.0]])  # learner mass sits on the costly action
    disc = np.full((1, 2), 0.5)
    values = [saddle_objective(rho_pi, rho_e, disc, lam, cost, 0.9) for lam in (0.0, 0.5, 1.0)]
    assert values[0] < values[1] < values[2]


def golden_section_max(f, lo, hi, iters=200):
    # independent maximizer for the closed-form check
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
        else:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
    return 0.5 * (a + b)


def test_optimal_discriminator_matches_numeric():
    rng = np.random.default_rng(6)
    rho_pi = rng.uniform(0.1, 2.0, (4, 2))
    rho_e = rng.uniform(0.1, 2.0, (4, 2))
    d_star = optimal_discriminator(rho_pi, rho_e)
    for s in range(4):
        for a in range(2):
            p, e = rho_pi[s, a], rho_e[s, a]
            num = golden_section_max(
                lambda d: p * math.log(d) + e * math.log(1.0 - d), 1e-9, 1.0 - 1e-9)
            assert abs(num - d_star[s, a]) < 1e-6


def test_optimal_discriminator_empty_cells_default_half():
    d = optimal_discriminator(np.zeros((1, 2)), np.zeros((1, 2)))
    assert d == pytest.approx(np.full((1, 2), 0.5))


def test_saddle_validates_inputs():
    rho = np.full((2, 2), 0.25)
    with pytest.raises(ValueError, match="strictly inside"):
        saddle_objective(rho, rho, np.ones((2, 2)), 0.0, rho, 0.9)
    with pytest.raises(ValueError, match="shape"):
        saddle_objective(rho, np.zeros((3, 2)), rho * 0.5, 0.0, rho, 0.9)
    with pytest.raises(ValueError, match="nonnegative"):
        saddle_objective(rho, rho, rho * 0.5, -1.0, rho, 0.9)


# -- tables and the grid export -----------------------------------------------


def test_tabular_validation():
    good = single_state_mdp()
    assert good.n_states == 1 and good.n_actions == 2
    with pytest.raises(ValueError, match="distributions"):
        TabularCmdp(np.full((1, 2, 1), 0.5), np.array([1.0]), np.zeros((1, 2)),
                    np.zeros((1, 2)), 0.9)
    with pytest.raises(ValueError, match="discount"):
        TabularCmdp(np.ones((1, 2, 1)), np.array([1.0]), np.zeros((1, 2)),
                    np.zeros((1, 2)), 1.0)
    with pytest.raises(ValueError, match="shape"):
        TabularCmdp(np.ones((1, 2, 1)), np.array([1.0]), np.zeros((2, 2)),
                    np.zeros((1, 2)), 0.9)


def test_grid_export_structure():
    spec = GridHazardSpec()
    mdp = grid_tabular(spec)
    assert mdp.n_states == 45 and mdp.n_actions == 4
    start_idx = spec.start[1] * spec.width + spec.start[0]
    assert mdp.start[start_idx] == 1.0 and mdp.start.sum() == 1.0
    goal_idx = spec.goal[1] * spec.width + spec.goal[0]
    # absorbing goal: self-loop, no further reward or cost
    assert np.all(mdp.transition[goal_idx, :, goal_idx] == 1.0)
    assert np.all(mdp.reward[goal_idx] == 0.0) and np.all(mdp.cost[goal_idx] == 0.0)


def test_grid_export_slip_expectations():
    spec = GridHazardSpec()
    mdp = grid_tabular(spec)
    # (2,1) moving right enters hazard (3,1); only that one of the four moves hits
    s = 1 * spec.width + 2
    assert mdp.cost[s, 3] == pytest.approx((1.0 - spec.slip) + spec.slip / 4.0)
    # (7,2) moving right: the goal pays the bonus plus one step of progress;
    # each of the three slip outcomes moves one step away instead
    s = 2 * spec.width + 7
    p_hit = (1.0 - spec.slip) + spec.slip / 4.0
    expected = p_hit * (1.0 + spec.progress_coef) - (1.0 - p_hit) * spec.progress_coef
    assert mdp.reward[s, 3] == pytest.approx(expected)


def test_grid_export_occupancy_invariants():
    mdp = grid_tabular()
    rho = exact_occupancy(mdp, np.full((45, 4), 0.25))
    assert rho.sum() == pytest.approx(1.0 / (1.0 - mdp.discount), abs=1e-8)
    assert flow_residual(mdp, rho) < 1e-8


def test_run_oracle_checks_all_pass():
    results = run_oracle_checks(seed=0, cases=10)
    assert all(r.passed for r in results), [r for r in results if not r.passed]
