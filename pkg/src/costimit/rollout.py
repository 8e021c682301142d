"""Batch collection, surrogate reward labeling, and advantage estimation.

A batch is exactly K consecutive environment steps.  The trailing episode is
usually cut off by the batch edge; it is excluded from per-episode statistics
and its tail bootstraps from the value function instead of terminating.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class BatchStats:
    """Per-batch episode statistics over completed episodes only."""

    episodes: int
    mean_episode_cost: float  # J_k
    mean_true_return: float  # privileged, reporting only
    mean_surrogate_return: float | None
    total_cost: float  # all K steps, truncated tail included
    steps: int


class TrajectoryBatch:
    """Flat arrays for K steps plus the observation after the last step."""

    def __init__(self, obs, actions, logp, true_rewards, costs, dones, bootstrap_obs,
                 clip_fraction=0.0):
        self.obs = np.asarray(obs, dtype=np.float64)
        self.actions = np.asarray(actions)
        self.logp = np.asarray(logp, dtype=np.float64)
        self.true_rewards = np.asarray(true_rewards, dtype=np.float64)
        self.costs = np.asarray(costs, dtype=np.float64)
        self.dones = np.asarray(dones, dtype=np.float64)
        self.bootstrap_obs = np.asarray(bootstrap_obs, dtype=np.float64)
        self.clip_fraction = clip_fraction
        self.surrogate_rewards: np.ndarray | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    def episode_slices(self) -> list[tuple[slice, bool]]:
        """(slice, completed) per episode, in order; the tail may be incomplete."""
        out = []
        start = 0
        for t in range(len(self)):
            if self.dones[t]:
                out.append((slice(start, t + 1), True))
                start = t + 1
        if start < len(self):
            out.append((slice(start, len(self)), False))
        return out

    def stats(self) -> BatchStats:
        complete = [s for s, done in self.episode_slices() if done]
        if not complete:
            raise ValueError("batch contains no completed episode; increase the batch size")
        costs = [float(self.costs[s].sum()) for s in complete]
        rets = [float(self.true_rewards[s].sum()) for s in complete]
        surr = None
        if self.surrogate_rewards is not None:
            surr = float(np.mean([self.surrogate_rewards[s].sum() for s in complete]))
        return BatchStats(
            episodes=len(complete),
            mean_episode_cost=float(np.mean(costs)),
            mean_true_return=float(np.mean(rets)),
            mean_surrogate_return=surr,
            total_cost=float(self.costs.sum()),
            steps=len(self),
        )


def collect(policy, env, n_steps: int, rng: np.random.Generator) -> TrajectoryBatch:
    """Run the policy for exactly n_steps, resetting the env between episodes."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    obs_l, act_l, logp_l, rew_l, cost_l, done_l = [], [], [], [], [], []
    clipped = 0
    obs = env.reset()
    for _ in range(n_steps):
        action, logp = policy.act(obs, rng)
        outcome = env.step(action)
        obs_l.append(obs)
        act_l.append(action)
        logp_l.append(logp)
        rew_l.append(outcome.true_reward)
        cost_l.append(outcome.cost)
        done_l.append(outcome.done)
        clipped += outcome.action_clipped
        obs = env.reset() if outcome.done else outcome.observation
    return TrajectoryBatch(
        np.array(obs_l), np.array(act_l), np.array(logp_l), np.array(rew_l),
        np.array(cost_l), np.array(done_l, dtype=np.float64), obs,
        clip_fraction=clipped / n_steps,
    )


def label_surrogate_reward(batch: TrajectoryBatch, disc,
                           convention: str = "objective") -> np.ndarray:
    """Label every step with the discriminator surrogate.

    objective convention: r_t = -log D(s_t, a_t); the swapped convention uses
    -log(1 - D).  Clamped D keeps both finite.
    """
    d = disc.prob_pairs(batch.obs, batch.actions)
    if convention == "objective":
        rewards = -np.log(d)
    elif convention == "swapped":
        rewards = -np.log(1.0 - d)
    else:
        raise ValueError(f"unknown discriminator convention {convention!r}")
    batch.surrogate_rewards = rewards
    return rewards


def gae(x: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float,
        bootstrap_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a flat batch with episode resets.

    delta_t = x_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t); the recursion
    A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1} restarts at episode
    boundaries; the final dangling segment bootstraps from bootstrap_value.
    Returns (advantages, returns-to-go) with returns = advantages + values.
    """
    x = np.asarray(x, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(x)
    adv = np.zeros(T)
    lastgaelam = 0.0
    for t in reversed(range(T)):
        nextnonterminal = 1.0 - dones[t]
        nextvalue = values[t + 1] if t + 1 < T else bootstrap_value
        delta = x[t] + gamma * nextvalue * nextnonterminal - values[t]
        lastgaelam = delta + gamma * lam * nextnonterminal * lastgaelam
        adv[t] = lastgaelam
    return adv, adv + values


def whiten(x: np.ndarray) -> np.ndarray:
    """Mean-zero, unit-variance rescaling (epsilon-guarded)."""
    return (x - x.mean()) / (x.std() + 1e-8)


@dataclass
class AdvantageBuffer:
    """Two-channel advantages for one batch.

    The reward channel is whitened (the series the policy step consumes); the
    raw series is kept for the meta-gradient path.  Cost advantages are never
    whitened: they are combined with lambda, whose scale is meaningful.
    """

    adv_reward: np.ndarray
    adv_reward_raw: np.ndarray
    adv_cost: np.ndarray
    returns_reward: np.ndarray
    returns_cost: np.ndarray
    values_reward: np.ndarray
    values_cost: np.ndarray


def build_advantages(batch: TrajectoryBatch, value_r, value_d, gamma: float, lam: float,
                     costs_override: np.ndarray | None = None) -> AdvantageBuffer:
    """GAE on both channels from current value predictions.

    costs_override replaces the cost series seen by the learning path (used to
    zero the channel); reporting always reads the batch's raw costs.
    """
    if batch.surrogate_rewards is None:
        raise ValueError("label the batch with surrogate rewards first")
    vr = value_r.value(batch.obs)
    vd = value_d.value(batch.obs)
    boot_r = float(value_r.value(batch.bootstrap_obs[None, :])[0])
    boot_d = float(value_d.value(batch.bootstrap_obs[None, :])[0])
    costs = batch.costs if costs_override is None else costs_override
    adv_r, ret_r = gae(batch.surrogate_rewards, vr, batch.dones, gamma, lam, boot_r)
    adv_d, ret_d = gae(costs, vd, batch.dones, gamma, lam, boot_d)
    return AdvantageBuffer(
        adv_reward=whiten(adv_r),
        adv_reward_raw=adv_r,
        adv_cost=adv_d,
        returns_reward=ret_r,
        returns_cost=ret_d,
        values_reward=vr,
        values_cost=vd,
    )


# -- JSON-lines serialization --------------------------------------------------


def _step_record(batch: TrajectoryBatch, t: int, episode_t: int) -> dict:
    act = batch.actions[t]
    act_json = int(act) if np.ndim(act) == 0 else [float(a) for a in act]
    return {
        "t": episode_t,
        "obs": [float(v) for v in batch.obs[t]],
        "act": act_json,
        "logp": float(batch.logp[t]),
        "r_true": float(batch.true_rewards[t]),
        "r_surr": None if batch.surrogate_rewards is None else float(batch.surrogate_rewards[t]),
        "cost": float(batch.costs[t]),
        "done": bool(batch.dones[t]),
    }


def save_batch_jsonl(batch: TrajectoryBatch, path, header: dict | None = None) -> None:
    """One JSON step per line, t counted within its episode; optional header line."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        episode_t = 0
        for t in range(len(batch)):
            fh.write(json.dumps(_step_record(batch, t, episode_t)) + "\n")
            episode_t = 0 if batch.dones[t] else episode_t + 1
