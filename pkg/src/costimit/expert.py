"""Expert dataset forging: solve the forward constrained problem, sample, save.

The forge runs trust-region policy optimization on the privileged true reward
with a penalized surrogate against a fixed cost budget, stops once the policy
is feasible and its reward has plateaued, then samples whole trajectories from
the stochastic converged policy.  Datasets are JSON-lines files with a header
carrying provenance and recomputable summary statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .envs import make_env
from .learners import (ExpertAnchor, LagrangianState, evaluate_policy,
                       fit_value_networks)
from .nets import CategoricalPolicy, GaussianPolicy, ValueNet
from .params import Adam
from .rollout import build_advantages, collect
from .trust_region import (SurrogateBatch, SurrogateSpec, TrustRegionConfig,
                           trust_region_step)

DATASET_KIND = "expert-dataset"
DATASET_VERSION = 1


class FeasibilityError(RuntimeError):
    """The solver or sampler could not meet the cost budget; carries best-so-far."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Trajectory:
    """One full episode with the true reward retained."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    @property
    def episode_cost(self) -> float:
        return float(self.costs.sum())


@dataclass(frozen=True)
class ExpertSolverConfig:
    """Forward-solver hyperparameters; defaults are sized for the grid env."""

    batch_size: int = 600
    iterations: int = 500
    policy_passes: int = 3
    gamma: float = 0.995
    gae_lam: float = 0.97
    value_lr: float = 1e-3
    lagrange_init: float = 0.01
    # slow dual ascent: a quasi-static sweep stops at a saturating policy
    # instead of overshooting into a fully safe one
    lagrange_lr: float = 0.01
    feasibility_margin: float = 1.05
    plateau_window: int = 10
    plateau_tol: float = 0.03
    eval_episodes: int = 100
    hidden: tuple[int, ...] = (16, 16)
    trust: TrustRegionConfig = field(default_factory=TrustRegionConfig)

    def as_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "iterations": self.iterations,
            "policy_passes": self.policy_passes, "gamma": self.gamma,
            "gae_lam": self.gae_lam, "value_lr": self.value_lr,
            "lagrange_init": self.lagrange_init, "lagrange_lr": self.lagrange_lr,
            "feasibility_margin": self.feasibility_margin,
            "plateau_window": self.plateau_window, "plateau_tol": self.plateau_tol,
            "eval_episodes": self.eval_episodes, "hidden": list(self.hidden),
        }


def _plateaued(returns: list[float], window: int, tol: float) -> bool:
    if len(returns) < 2 * window:
        return False
    recent = float(np.mean(returns[-window:]))
    prev = float(np.mean(returns[-2 * window:-window]))
    return abs(recent - prev) <= tol * max(1.0, abs(prev))


def _build_policy_and_values(env, hidden, rng_policy, rng_value):
    space = env.spec.action_space
    if space[0] == "discrete":
        policy = CategoricalPolicy(env.spec.obs_dim, hidden, space[1], rng=rng_policy)
    else:
        policy = GaussianPolicy(env.spec.obs_dim, hidden, space[1], rng=rng_policy)
    value_r = ValueNet(env.spec.obs_dim, hidden, rng=rng_value)
    value_d = ValueNet(env.spec.obs_dim, hidden, rng=rng_value)
    return policy, value_r, value_d


def train_expert(env, budget: float, *, cfg: ExpertSolverConfig = ExpertSolverConfig(),
                 seed: int = 0):
    """Constrained trust-region training on the true reward until feasibility.

    Stops when the batch reward has plateaued and a fresh 100-episode
    evaluation keeps mean cost within feasibility_margin * budget; hitting the
    iteration cap first raises FeasibilityError with best-so-far diagnostics.
    Returns (policy, history) where history is one dict per iteration.
    """
    if budget < 0:
        raise ValueError("cost budget cannot be negative")
    streams = np.random.SeedSequence(seed).spawn(4)
    rng_policy, rng_value, rng_act, rng_eval = (
        np.random.Generator(np.random.Philox(s)) for s in streams)
    policy, value_r, value_d = _build_policy_and_values(env, cfg.hidden, rng_policy, rng_value)
    opt_r, opt_d = Adam(lr=cfg.value_lr), Adam(lr=cfg.value_lr)
    lagrange = LagrangianState(lam=cfg.lagrange_init, lr=cfg.lagrange_lr)
    limit = cfg.feasibility_margin * budget
    history: list[dict] = []
    returns: list[float] = []
    best = {"eval_cost": math.inf, "eval_return": -math.inf, "iteration": 0}
    for iteration in range(1, cfg.iterations + 1):
        batch = collect(policy, env, cfg.batch_size, rng_act)
        batch.surrogate_rewards = batch.true_rewards.copy()  # the true reward IS the label
        buf = build_advantages(batch, value_r, value_d, cfg.gamma, cfg.gae_lam)
        stats = batch.stats()
        spec = SurrogateSpec(mode="penalized", lam=lagrange.lam)
        for _ in range(cfg.policy_passes):
            sb = SurrogateBatch(
                states=batch.obs, actions=batch.actions,
                logp_old=policy.logp(batch.obs, batch.actions),
                adv_reward=buf.adv_reward, adv_cost=buf.adv_cost)
            trust_region_step(policy, sb, spec, cfg.trust)
        fit_value_networks(batch.obs, buf.returns_reward, buf.returns_cost,
                           value_r, value_d, opt_r, opt_d)
        lam_used = lagrange.lam
        lagrange.update(stats.mean_episode_cost, budget)
        returns.append(stats.mean_true_return)
        row = {"iteration": iteration, "mean_return": stats.mean_true_return,
               "mean_cost": stats.mean_episode_cost, "lam": lam_used}
        if _plateaued(returns, cfg.plateau_window, cfg.plateau_tol) \
                and stats.mean_episode_cost <= limit:
            report = evaluate_policy(policy, env, cfg.eval_episodes, rng_eval)
            row["eval_return"] = report.mean_return
            row["eval_cost"] = report.mean_cost
            if report.mean_cost < best["eval_cost"]:
                best = {"eval_cost": report.mean_cost, "eval_return": report.mean_return,
                        "iteration": iteration}
            if report.mean_cost <= limit:
                history.append(row)
                return policy, history
        history.append(row)
    raise FeasibilityError(
        f"no feasible plateau within {cfg.iterations} iterations "
        f"(budget {budget}, margin {cfg.feasibility_margin})",
        diagnostics={"best": best, "last": history[-1] if history else None},
    )


def sample_trajectories(policy, env, episodes: int, rng: np.random.Generator
                        ) -> list[Trajectory]:
    """Roll whole episodes from the stochastic policy."""
    out = []
    for _ in range(episodes):
        obs = env.reset()
        rows = []
        done = False
        while not done:
            action, logp = policy.act(obs, rng)
            outcome = env.step(action)
            rows.append((obs, action, logp, outcome.true_reward, outcome.cost))
            obs = outcome.observation
            done = outcome.done
        o, a, lp, r, c = zip(*rows)
        out.append(Trajectory(np.array(o), np.array(a), np.array(lp, dtype=np.float64),
                              np.array(r, dtype=np.float64), np.array(c, dtype=np.float64)))
    return out


def mint_trajectories(policy, env, budget: float, episodes: int,
                      rng: np.random.Generator, *, margin: float = 1.05,
                      max_resamples: int = 20) -> list[Trajectory]:
    """Sample a dataset whose mean episode cost honors the budget contract.

    Whole batches are resampled until the summary constraint holds; the policy
    is feasible in expectation, so a compliant draw arrives quickly.
    """
    attempts = []
    for _ in range(max_resamples):
        trajs = sample_trajectories(policy, env, episodes, rng)
        mean_cost = float(np.mean([t.episode_cost for t in trajs]))
        if mean_cost <= margin * budget:
            return trajs
        attempts.append(mean_cost)
    raise FeasibilityError(
        f"sampled {max_resamples} datasets, all above {margin:.2f} * budget",
        diagnostics={"mean_costs": attempts},
    )


# -- the dataset -----------------------------------------------------------------


def _summary_from(trajectories: list[Trajectory]) -> dict:
    rets = np.array([t.episode_return for t in trajectories])
    costs = np.array([t.episode_cost for t in trajectories])
    return {
        "episodes": len(trajectories),
        "steps": int(sum(len(t) for t in trajectories)),
        "reward_mean": float(rets.mean()),
        "reward_std": float(rets.std()),
        "cost_mean": float(costs.mean()),
        "cost_std": float(costs.std()),
        "cost_min": float(costs.min()),
    }


@dataclass
class ExpertDataset:
    """Trajectories plus provenance; the summary is recomputable from the rows."""

    trajectories: list[Trajectory]
    env_name: str
    env_hash: str
    gamma: float
    budget: float
    seed: int
    solver: dict
    summary: dict

    @classmethod
    def build(cls, trajectories, env, budget: float, seed: int, solver: dict
              ) -> "ExpertDataset":
        if not trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        return cls(
            trajectories=list(trajectories),
            env_name=env.spec.name,
            env_hash=env.fingerprint(),
            gamma=env.spec.discount,
            budget=budget,
            seed=seed,
            solver=dict(solver),
            summary=_summary_from(trajectories),
        )

    def episode_returns(self) -> np.ndarray:
        return np.array([t.episode_return for t in self.trajectories])

    def episode_costs(self) -> np.ndarray:
        return np.array([t.episode_cost for t in self.trajectories])

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All (state, action) rows, flattened across trajectories."""
        obs = np.concatenate([t.obs for t in self.trajectories])
        actions = np.concatenate([t.actions for t in self.trajectories])
        return obs, actions

    def anchor(self) -> ExpertAnchor:
        return ExpertAnchor.from_episodes(self.episode_returns(), self.episode_costs())

    def verify(self) -> None:
        """Recompute the summary from raw rows; any drift is an error."""
        fresh = _summary_from(self.trajectories)
        for key, value in fresh.items():
            stored = self.summary.get(key)
            if stored is None or not math.isclose(stored, value, rel_tol=0, abs_tol=1e-9):
                raise ValueError(
                    f"dataset summary field {key!r} does not match the raw records "
                    f"(stored {stored}, recomputed {value})")


def save_expert_dataset(dataset: ExpertDataset, path) -> None:
    """JSON-lines: one header line, then one line per step."""
    header = {
        "kind": DATASET_KIND,
        "version": DATASET_VERSION,
        "env_name": dataset.env_name,
        "env_hash": dataset.env_hash,
        "gamma": dataset.gamma,
        "budget": dataset.budget,
        "seed": dataset.seed,
        "solver": dataset.solver,
        "summary": dataset.summary,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for episode, traj in enumerate(dataset.trajectories):
            for t in range(len(traj)):
                act = traj.actions[t]
                fh.write(json.dumps({
                    "episode": episode,
                    "t": t,
                    "obs": [float(v) for v in traj.obs[t]],
                    "act": int(act) if np.ndim(act) == 0 else [float(v) for v in act],
                    "logp": float(traj.logp[t]),
                    "r_true": float(traj.rewards[t]),
                    "cost": float(traj.costs[t]),
                }) + "\n")


def load_expert_dataset(path, *, expect_env_hash: str | None = None) -> ExpertDataset:
    """Parse, regroup into trajectories, and verify the stored summary."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != DATASET_KIND:
            raise ValueError(f"{path} is not an expert dataset file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        rows = [json.loads(line) for line in fh if line.strip()]
    if expect_env_hash is not None and header["env_hash"] != expect_env_hash:
        raise ValueError(
            "dataset was forged for a different environment "
            f"(dataset hash {header['env_hash'][:12]}..., expected {expect_env_hash[:12]}...)")
    episodes: dict[int, list[dict]] = {}
    for row in rows:
        episodes.setdefault(row["episode"], []).append(row)
    trajectories = []
    for episode in sorted(episodes):
        steps = sorted(episodes[episode], key=lambda r: r["t"])
        trajectories.append(Trajectory(
            obs=np.array([s["obs"] for s in steps], dtype=np.float64),
            actions=np.array([s["act"] for s in steps]),
            logp=np.array([s["logp"] for s in steps], dtype=np.float64),
            rewards=np.array([s["r_true"] for s in steps], dtype=np.float64),
            costs=np.array([s["cost"] for s in steps], dtype=np.float64),
        ))
    dataset = ExpertDataset(
        trajectories=trajectories,
        env_name=header["env_name"],
        env_hash=header["env_hash"],
        gamma=header["gamma"],
        budget=header["budget"],
        seed=header["seed"],
        solver=header.get("solver", {}),
        summary=header["summary"],
    )
    dataset.verify()
    return dataset


def summary_block(dataset: ExpertDataset) -> str:
    """Human-readable dataset card: reward and cost, mean plus/minus std."""
    s = dataset.summary
    lines = [
        f"{'environment':<14}{'reward (mean +/- std)':<26}{'cost (mean +/- std)':<24}"
        f"{'episodes':<10}{'budget'}",
        f"{dataset.env_name:<14}"
        f"{s['reward_mean']:.2f} +/- {s['reward_std']:.2f}{'':<12}"
        f"{s['cost_mean']:.2f} +/- {s['cost_std']:.2f}{'':<10}"
        f"{s['episodes']:<10}{dataset.budget:g}",
    ]
    return "\n".join(lines)


def forge_expert(env_name: str, budget: float, *, episodes: int = 10, seed: int = 0,
                 cfg: ExpertSolverConfig = ExpertSolverConfig(), env_kwargs: dict | None = None
                 ) -> tuple[ExpertDataset, list[dict]]:
    """End-to-end forge: solve, sample under the budget contract, package."""
    env = make_env(env_name, seed=seed, **(env_kwargs or {}))
    policy, history = train_expert(env, budget, cfg=cfg, seed=seed)
    rng_sample = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed).spawn(5)[4]))
    trajectories = mint_trajectories(policy, env, budget, episodes, rng_sample,
                                     margin=cfg.feasibility_margin)
    dataset = ExpertDataset.build(trajectories, env, budget, seed, cfg.as_dict())
    return dataset, history
