"""Exact tabular CMDP machinery: occupancy measures, entropy, saddle objective.

Everything here treats the infinite-horizon discounted formulation, so the
grid export is an idealization of the interactive env (which truncates at its
horizon).  Occupancy measures use the unnormalized convention: total mass
1/(1 - gamma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import GridHazardSpec

MASS_TOL = 1e-8
D_FLOOR = 1e-12  # keeps log terms finite on zero-mass cells


@dataclass
class TabularCmdp:
    """Finite CMDP tables: P[s, a, s'], p0[s], r[s, a], d[s, a], discount."""

    transition: np.ndarray
    start: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    discount: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.start = np.asarray(self.start, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError("transition table must have shape (S, A, S)")
        s, a, _ = self.transition.shape
        if self.start.shape != (s,) or self.reward.shape != (s, a) or self.cost.shape != (s, a):
            raise ValueError("start, reward, and cost shapes must match the transition table")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(2), 1.0, atol=1e-10):
            raise ValueError("transition rows must be distributions")
        if np.any(self.start < 0) or not math.isclose(self.start.sum(), 1.0, abs_tol=1e-10):
            raise ValueError("start distribution must be a distribution")
        if not np.all(np.isfinite(self.reward)) or not np.all(np.isfinite(self.cost)):
            raise ValueError("reward and cost tables must be finite")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie strictly between 0 and 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def _check_policy(mdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy table shape must be (S, A)")
    if np.any(policy < 0) or not np.allclose(policy.sum(1), 1.0, atol=1e-10):
        raise ValueError("policy rows must be distributions")
    return policy


def exact_occupancy(mdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """Solve the flow linear system for the discounted visitation mass.

    mu = p0 + gamma * T mu with T[s, s'] = sum_a policy[s', a] P[s', a, s];
    the returned rho[s, a] = mu[s] * policy[s, a] carries total mass
    1/(1 - gamma) and satisfies flow balance exactly (up to the solve).
    """
    policy = _check_policy(mdp, policy)
    # flow_in[s', s] = P(next = s | s', policy)
    flow = np.einsum("ua,uas->us", policy, mdp.transition)
    system = np.eye(mdp.n_states) - mdp.discount * flow.T
    try:
        mu = np.linalg.solve(system, mdp.start)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"flow system is singular (discount {mdp.discount})") from err
    return mu[:, None] * policy


def flow_residual(mdp: TabularCmdp, rho: np.ndarray) -> float:
    """Largest absolute violation of the occupancy flow-balance equations."""
    rho = np.asarray(rho, dtype=np.float64)
    inflow = np.einsum("ua,uas->s", rho, mdp.transition)
    return float(np.max(np.abs(rho.sum(1) - mdp.start - mdp.discount * inflow)))


def policy_from_occupancy(mdp: TabularCmdp, rho: np.ndarray, *,
                          tol: float = MASS_TOL) -> np.ndarray:
    """Recover the unique policy of a valid occupancy measure: rho / row mass.

    States with (numerically) zero mass get a uniform row when nothing flows
    into them; zero mass with nonzero flow demand means rho is inconsistent.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("occupancy table shape must be (S, A)")
    if np.any(rho < -tol):
        raise ValueError("occupancy masses must be nonnegative")
    mass = rho.sum(1)
    demand = mdp.start + mdp.discount * np.einsum("ua,uas->s", rho, mdp.transition)
    dead = mass <= tol
    if np.any(dead & (demand > tol)):
        bad = int(np.argmax(dead & (demand > tol)))
        raise ValueError(f"state {bad} has zero occupancy mass but positive flow demand")
    policy = np.full_like(rho, 1.0 / mdp.n_actions)
    live = ~dead
    policy[live] = rho[live] / mass[live, None]
    return policy


def occupancy_entropy(rho: np.ndarray) -> float:
    """-sum rho log(rho / row mass), with 0 log 0 = 0.

    Equals the policy's discounted causal entropy when rho is the policy's
    occupancy measure.
    """
    rho = np.asarray(rho, dtype=np.float64)
    mass = rho.sum(1, keepdims=True)
    live = rho > 0.0
    ratio = np.divide(rho, mass, out=np.ones_like(rho), where=mass > 0)
    return float(-np.sum(rho[live] * np.log(ratio[live])))


# -- Monte-Carlo oracles -------------------------------------------------------


def mc_horizon(gamma: float, tail: float = 1e-6) -> int:
    """Steps until the discount weight drops below `tail`."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("discount must lie strictly between 0 and 1")
    return int(math.ceil(math.log(tail) / math.log(gamma)))


def _sample_rows(prob_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a (n, k) probability matrix."""
    cum = np.cumsum(prob_rows, axis=1)
    u = rng.random(len(prob_rows)) * cum[:, -1]
    return (u[:, None] > cum).sum(axis=1)


def mc_occupancy(mdp: TabularCmdp, policy: np.ndarray, rng: np.random.Generator,
                 episodes: int = 100_000, horizon: int | None = None,
                 chunk: int = 50_000) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo discounted visitation: per-cell mean and standard error."""
    policy = _check_policy(mdp, policy)
    if horizon is None:
        horizon = mc_horizon(mdp.discount)
    s_n, a_n = mdp.n_states, mdp.n_actions
    total = np.zeros((s_n, a_n))
    total_sq = np.zeros((s_n, a_n))
    for lo in range(0, episodes, chunk):
        m = min(chunk, episodes - lo)
        counts = np.zeros((m, s_n, a_n))
        states = _sample_rows(np.tile(mdp.start, (m, 1)), rng)
        weight = 1.0
        rows = np.arange(m)
        for _ in range(horizon):
            actions = _sample_rows(policy[states], rng)
            counts[rows, states, actions] += weight
            states = _sample_rows(mdp.transition[states, actions], rng)
            weight *= mdp.discount
        total += counts.sum(0)
        total_sq += (counts * counts).sum(0)
    mean = total / episodes
    var = np.maximum(total_sq / episodes - mean * mean, 0.0)
    return mean, np.sqrt(var / episodes)


def mc_causal_entropy(mdp: TabularCmdp, policy: np.ndarray, rng: np.random.Generator,
                      episodes: int = 100_000, horizon: int | None = None,
                      chunk: int = 50_000) -> tuple[float, float]:
    """Monte-Carlo discounted causal entropy: mean and standard error.

    Per episode: sum_t gamma^t * (-log policy[s_t, a_t]).
    """
    policy = _check_policy(mdp, policy)
    if horizon is None:
        horizon = mc_horizon(mdp.discount)
    log_policy = np.log(np.maximum(policy, 1e-300))
    total = 0.0
    total_sq = 0.0
    for lo in range(0, episodes, chunk):
        m = min(chunk, episodes - lo)
        ent = np.zeros(m)
        states = _sample_rows(np.tile(mdp.start, (m, 1)), rng)
        weight = 1.0
        for _ in range(horizon):
            actions = _sample_rows(policy[states], rng)
            ent -= weight * log_policy[states, actions]
            states = _sample_rows(mdp.transition[states, actions], rng)
            weight *= mdp.discount
        total += ent.sum()
        total_sq += (ent * ent).sum()
    mean = total / episodes
    var = max(total_sq / episodes - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var / episodes))


# -- saddle objective ----------------------------------------------------------


def saddle_objective(rho_pi: np.ndarray, rho_e: np.ndarray, disc: np.ndarray,
                     lam: float, cost: np.ndarray, discount: float) -> float:
    """E_pi[log D] + E_E[log(1 - D)] + lam * (E_pi[d] - E_E[d]).

    Expectations are occupancy-weighted sums normalized by the total mass
    1/(1 - gamma).
    """
    rho_pi = np.asarray(rho_pi, dtype=np.float64)
    rho_e = np.asarray(rho_e, dtype=np.float64)
    disc = np.asarray(disc, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if not (rho_pi.shape == rho_e.shape == disc.shape == cost.shape):
        raise ValueError("all saddle tables must share one (S, A) shape")
    if np.any(disc <= 0.0) or np.any(disc >= 1.0):
        raise ValueError("discriminator entries must lie strictly inside (0, 1)")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    norm = 1.0 - discount
    value = norm * float(np.sum(rho_pi * np.log(disc)))
    value += norm * float(np.sum(rho_e * np.log1p(-disc)))
    value += lam * norm * float(np.sum((rho_pi - rho_e) * cost))
    return value


def optimal_discriminator(rho_pi: np.ndarray, rho_e: np.ndarray) -> np.ndarray:
    """Per-cell maximizer of the saddle discriminator terms: rho_pi/(rho_pi+rho_e).

    Cells with no mass on either side default to 1/2; outputs are floored away
    from {0, 1} so the log terms stay finite.
    """
    rho_pi = np.asarray(rho_pi, dtype=np.float64)
    rho_e = np.asarray(rho_e, dtype=np.float64)
    total = rho_pi + rho_e
    d = np.divide(rho_pi, total, out=np.full_like(rho_pi, 0.5), where=total > 0)
    return np.clip(d, D_FLOOR, 1.0 - D_FLOOR)


# -- generators -----------------------------------------------------------------


def random_tabular(rng: np.random.Generator, n_states: int = 5, n_actions: int = 3,
                   discount: float = 0.9) -> TabularCmdp:
    """Dense random CMDP with full-support transitions and start distribution."""
    return TabularCmdp(
        transition=rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)),
        start=rng.dirichlet(np.ones(n_states)),
        reward=rng.standard_normal((n_states, n_actions)),
        cost=rng.uniform(0.0, 1.0, (n_states, n_actions)),
        discount=discount,
    )


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def grid_tabular(spec: GridHazardSpec = GridHazardSpec()) -> TabularCmdp:
    """Export the hazard gridworld to tables, goal made absorbing.

    Rewards and costs become transition expectations: r(s, a) is the slip-
    averaged progress-shaped reward (progress_coef per Manhattan step toward
    the goal, plus 1 for stepping onto it), d(s, a) the probability of
    stepping onto a hazard cell.
    """
    n = spec.width * spec.height
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    hazards = frozenset(spec.hazards)

    def index(cell):
        return cell[1] * spec.width + cell[0]

    def target(cell, move):
        x = min(max(cell[0] + move[0], 0), spec.width - 1)
        y = min(max(cell[1] + move[1], 0), spec.height - 1)
        return (x, y)

    def distance(cell):
        return abs(cell[0] - spec.goal[0]) + abs(cell[1] - spec.goal[1])

    goal = index(spec.goal)
    transition = np.zeros((n, 4, n))
    reward = np.zeros((n, 4))
    cost = np.zeros((n, 4))
    for y in range(spec.height):
        for x in range(spec.width):
            s = index((x, y))
            if s == goal:
                transition[s, :, s] = 1.0
                continue
            for a in range(4):
                for m, move in enumerate(moves):
                    p = (1.0 - spec.slip) * (m == a) + spec.slip / 4.0
                    nxt = target((x, y), move)
                    step_reward = spec.progress_coef * (distance((x, y)) - distance(nxt))
                    if index(nxt) == goal:
                        step_reward += 1.0
                    transition[s, a, index(nxt)] += p
                    reward[s, a] += p * step_reward
                    cost[s, a] += p * (nxt in hazards)
    start = np.zeros(n)
    start[index(spec.start)] = 1.0
    return TabularCmdp(transition, start, reward, cost, spec.discount)


# -- the validation suite --------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _ternary_max(f, lo: float, hi: float, iters: int = 200) -> float:
    """Argmax of a unimodal scalar function on (lo, hi)."""
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
    return 0.5 * (lo + hi)


def run_oracle_checks(seed: int = 0, cases: int = 20) -> list[CheckResult]:
    """The tabular validation suite behind the oracle-check command."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    results = []

    # occupancy invariants and the policy round-trip on random CMDPs
    mass_err = flow_err = trip_err = 0.0
    for i in range(cases):
        discount = (0.5, 0.9, 0.99)[i % 3]
        mdp = random_tabular(rng, n_states=int(rng.integers(2, 11)),
                             n_actions=int(rng.integers(2, 5)), discount=discount)
        policy = random_policy(rng, mdp.n_states, mdp.n_actions)
        rho = exact_occupancy(mdp, policy)
        mass_err = max(mass_err, abs(rho.sum() - 1.0 / (1.0 - discount)))
        flow_err = max(flow_err, flow_residual(mdp, rho))
        back = exact_occupancy(mdp, policy_from_occupancy(mdp, rho))
        trip_err = max(trip_err, float(np.max(np.abs(back - rho))))
    results.append(CheckResult("occupancy total mass 1/(1-gamma)", mass_err < MASS_TOL,
                               f"max deviation {mass_err:.2e} over {cases} CMDPs"))
    results.append(CheckResult("occupancy flow balance", flow_err < MASS_TOL,
                               f"max residual {flow_err:.2e}"))
    results.append(CheckResult("occupancy -> policy -> occupancy round trip",
                               trip_err < MASS_TOL, f"max error {trip_err:.2e}"))

    # entropy of the exact occupancy vs Monte-Carlo causal entropy
    ok = True
    details = []
    for discount in (0.5, 0.9):
        mdp = random_tabular(rng, n_states=4, n_actions=3, discount=discount)
        policy = random_policy(rng, 4, 3)
        exact = occupancy_entropy(exact_occupancy(mdp, policy))
        est, se = mc_causal_entropy(mdp, policy, rng, episodes=60_000)
        gap = abs(exact - est)
        ok = ok and gap <= 3.0 * se
        details.append(f"gamma {discount}: |{exact:.4f} - {est:.4f}| vs 3se {3 * se:.4f}")
    results.append(CheckResult("entropy matches Monte-Carlo causal entropy", ok,
                               "; ".join(details)))

    # saddle objective structure
    mdp = random_tabular(rng, n_states=5, n_actions=3, discount=0.9)
    rho_pi = exact_occupancy(mdp, random_policy(rng, 5, 3))
    rho_e = exact_occupancy(mdp, random_policy(rng, 5, 3))
    same = saddle_objective(rho_pi, rho_pi, np.full((5, 3), 0.5), 0.7, mdp.cost, 0.9)
    results.append(CheckResult("identical measures at D = 1/2 give 2 log(1/2)",
                               abs(same - 2.0 * math.log(0.5)) < 1e-10,
                               f"value {same:.12f}"))

    d_star = optimal_discriminator(rho_pi, rho_e)
    worst = 0.0
    for s in range(5):
        for a in range(3):
            p, e = rho_pi[s, a], rho_e[s, a]
            num = _ternary_max(lambda d: p * math.log(d) + e * math.log(1.0 - d),
                               1e-9, 1.0 - 1e-9)
            worst = max(worst, abs(num - d_star[s, a]))
    results.append(CheckResult("closed-form discriminator matches numeric maximizer",
                               worst < 1e-6, f"max |D* - numeric| {worst:.2e}"))

    disc = np.clip(rng.uniform(0.05, 0.95, (5, 3)), 1e-6, 1 - 1e-6)
    f0 = saddle_objective(rho_pi, rho_e, disc, 0.0, mdp.cost, 0.9)
    f1 = saddle_objective(rho_pi, rho_e, disc, 1.0, mdp.cost, 0.9)
    f2 = saddle_objective(rho_pi, rho_e, disc, 2.0, mdp.cost, 0.9)
    lin = abs(f2 - 2.0 * f1 + f0)
    results.append(CheckResult("saddle objective linear in lambda", lin < 1e-12,
                               f"three-point curvature {lin:.2e}"))

    d1 = rng.uniform(0.1, 0.9, (5, 3))
    d2 = rng.uniform(0.1, 0.9, (5, 3))
    mid = saddle_objective(rho_pi, rho_e, (d1 + d2) / 2.0, 0.3, mdp.cost, 0.9)
    ends = 0.5 * (saddle_objective(rho_pi, rho_e, d1, 0.3, mdp.cost, 0.9)
                  + saddle_objective(rho_pi, rho_e, d2, 0.3, mdp.cost, 0.9))
    results.append(CheckResult("saddle objective concave in D", mid >= ends - 1e-12,
                               f"midpoint {mid:.6f} vs chord {ends:.6f}"))

    # the shipped grid export obeys the same invariants
    grid = grid_tabular()
    uniform = np.full((grid.n_states, 4), 0.25)
    rho = exact_occupancy(grid, uniform)
    g_mass = abs(rho.sum() - 1.0 / (1.0 - grid.discount))
    g_flow = flow_residual(grid, rho)
    results.append(CheckResult("grid export satisfies occupancy invariants",
                               g_mass < MASS_TOL and g_flow < MASS_TOL,
                               f"mass deviation {g_mass:.2e}, flow residual {g_flow:.2e}"))
    return results
