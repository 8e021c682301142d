"""Training loops: constrained adversarial imitation and the plain baselines.

One shared iteration engine drives every adversarial variant; the algorithms
differ only in how the dual variable is handled, which surrogate the policy
step maximizes, and which data split each update consumes.  That makes the
degenerate identities testable: the penalized engine with the dual pinned at
zero and the cost channel zeroed IS the unconstrained adversarial baseline,
update for update.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .adversarial import Discriminator, discriminator_update
from .metrics import cost_violation, recovered_return
from .nets import CategoricalPolicy, GaussianPolicy, ValueNet
from .params import Adam
from .rollout import build_advantages, collect, label_surrogate_reward
from .trust_region import (SurrogateBatch, SurrogateSpec, TrustRegionConfig,
                           trust_region_step)

ALGORITHMS = ("ccil", "malm", "cvag", "gail", "lgail", "bc")


@dataclass
class LagrangianState:
    """Projected dual variable for the cost constraint.

    update() ascends lam * (J_k - limit) and projects back to lam >= 0;
    mode "adam" routes the same ascent direction through an Adam step.
    """

    lam: float = 0.01
    lr: float = 0.05
    mode: str = "plain"
    opt: Adam | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("the dual variable must start nonnegative")
        if self.mode not in ("plain", "adam"):
            raise ValueError(f"unknown dual update mode {self.mode!r}")
        if self.mode == "adam" and self.opt is None:
            self.opt = Adam(lr=self.lr)

    def update(self, j_k: float, limit: float) -> float:
        if not (math.isfinite(j_k) and math.isfinite(limit)):
            raise ValueError("dual update needs finite episode costs")
        if self.mode == "plain":
            self.lam = max(0.0, self.lam + self.lr * (j_k - limit))
        else:
            stepped = self.opt.step(np.array([self.lam]), np.array([j_k - limit]),
                                    direction="ascent")
            self.lam = max(0.0, float(stepped[0]))
        return self.lam

    def snapshot(self) -> dict:
        return {"lam": self.lam, "opt": None if self.opt is None else self.opt.state_dict()}

    def restore(self, state: dict) -> None:
        self.lam = state["lam"]
        if self.opt is not None and state["opt"] is not None:
            self.opt.load_state_dict(state["opt"])


@dataclass(frozen=True)
class ExpertAnchor:
    """Per-episode anchors recomputed from the expert dataset."""

    mean_return: float
    mean_cost: float
    min_cost: float

    @property
    def lgail_limit(self) -> float:
        """90% of the smallest expert episode cost."""
        return 0.9 * self.min_cost

    @classmethod
    def from_episodes(cls, episode_returns, episode_costs) -> "ExpertAnchor":
        rets = np.asarray(episode_returns, dtype=np.float64)
        costs = np.asarray(episode_costs, dtype=np.float64)
        if len(rets) == 0 or len(rets) != len(costs):
            raise ValueError("need matching, nonempty episode return and cost lists")
        return cls(float(rets.mean()), float(costs.mean()), float(costs.min()))


def split_by_episode(dones, train_frac: float = 0.7) -> tuple[slice, slice]:
    """Contiguous train/validation split of a flat step batch.

    The cut lands on the episode boundary nearest the requested fraction so
    whole episodes stay on one side; with no interior boundary it falls back
    to a plain index cut.  Both sides are always nonempty.
    """
    dones = np.asarray(dones)
    n = len(dones)
    if n < 2:
        raise ValueError("cannot split fewer than two steps")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train fraction must be strictly between 0 and 1")
    target = train_frac * n
    boundaries = [t + 1 for t in range(n - 1) if dones[t]]
    if boundaries:
        cut = min(boundaries, key=lambda b: abs(b - target))
    else:
        cut = min(max(int(target), 1), n - 1)
    return slice(0, cut), slice(cut, n)


def meta_outer_loss(adv_reward_raw, costs, lam: float) -> float:
    """Mean squared penalized advantage, the validation objective for the dual."""
    a = np.asarray(adv_reward_raw, dtype=np.float64)
    d = np.asarray(costs, dtype=np.float64)
    return float(np.mean((a - lam * d) ** 2))


def meta_lambda_gradient(adv_reward_raw, costs, lam: float) -> float:
    """Exact derivative of meta_outer_loss in lam: mean of -2 d (A - lam d)."""
    a = np.asarray(adv_reward_raw, dtype=np.float64)
    d = np.asarray(costs, dtype=np.float64)
    return float(np.mean(-2.0 * d * (a - lam * d)))


def cvag_branch(j_k: float, limit: float) -> str:
    """Alternating-gradient branch choice; within budget (inclusive) chases reward."""
    if not (math.isfinite(j_k) and math.isfinite(limit)):
        raise ValueError("branch selection needs finite episode costs")
    return "reward-only" if j_k <= limit else "cost-minimizing"


def fit_value_networks(obs, returns_reward, returns_cost, value_r: ValueNet,
                       value_d: ValueNet, opt_r: Adam, opt_d: Adam,
                       epochs: int = 1) -> tuple[float, float]:
    """Full-batch Adam descent on both value networks; returns pre-fit losses."""
    first = None
    for _ in range(epochs):
        loss_r, grad_r = value_r.mse_and_grad(obs, returns_reward)
        value_r.set_values(opt_r.step(value_r.params.values, grad_r.values))
        loss_d, grad_d = value_d.mse_and_grad(obs, returns_cost)
        value_d.set_values(opt_d.step(value_d.params.values, grad_d.values))
        if first is None:
            first = (loss_r, loss_d)
    if first is None:
        raise ValueError("value fitting needs at least one epoch")
    return first


@dataclass(frozen=True)
class AlgoRules:
    """How one algorithm wires the shared iteration engine."""

    lagrangian: bool  # penalized surrogate driven by the dual variable
    update_lambda: bool  # plain dual ascent after the policy step
    meta_step: bool  # validation-split meta-gradient on the dual
    alternating: bool  # reward-only vs cost-minimizing, picked by J_k
    zero_cost_channel: bool  # learning path ignores costs (reporting never does)
    limit: str  # "expert" -> mean expert cost; "minimum" -> 0.9 * min


ALGO_RULES = {
    "ccil": AlgoRules(True, True, False, False, False, "expert"),
    "malm": AlgoRules(True, True, True, False, False, "expert"),
    "cvag": AlgoRules(False, False, False, True, False, "expert"),
    "gail": AlgoRules(True, False, False, False, True, "expert"),
    "lgail": AlgoRules(True, True, False, False, False, "minimum"),
}


@dataclass(frozen=True)
class EngineConfig:
    """Hyperparameters of the shared adversarial-imitation engine."""

    batch_size: int = 2000
    gamma: float = 0.995
    gae_lam: float = 0.97
    policy_passes: int = 3
    disc_passes: int = 1
    policy_entropy: float = 0.0
    value_lr: float = 1e-3
    value_epochs: int = 1
    disc_lr: float = 3e-4
    disc_entropy: float = 1e-3
    convention: str = "objective"
    lagrange_init: float = 0.01
    lagrange_lr: float = 0.05
    lagrange_mode: str = "plain"
    limit_override: float | None = None
    meta_lr: float = 0.05
    meta_train_frac: float = 0.7
    zero_cost_channel: bool = False  # force the channel off even outside gail
    trust: TrustRegionConfig = field(default_factory=TrustRegionConfig)


@dataclass(frozen=True)
class IterationRecord:
    """One row of the training log."""

    iteration: int
    steps: int  # cumulative environment steps
    episodes: int  # completed episodes in this batch
    mean_true_return: float
    mean_cost: float  # J_k over completed episodes
    mean_surrogate_return: float
    lam: float  # dual value the surrogate actually used (pre-update)
    kl: float  # largest per-pass divergence this iteration
    cost_rate: float  # cumulative cost / cumulative steps
    disc_loss: float
    surrogate_mode: str
    accepted_passes: int
    clip_fraction: float


class ImitationLearner:
    """Shared iteration engine behind ccil, malm, cvag, gail, and lgail.

    One iteration: collect a batch, label it with the discriminator surrogate,
    estimate both advantage channels, run the policy passes inside the trust
    region, fit both value networks, update the discriminator, then update the
    dual variable.  The surrogate always consumes the pre-update dual value.
    Any sub-step error rolls every piece of state back to the iteration start.
    """

    def __init__(self, algo: str, policy, env, expert_obs: np.ndarray,
                 expert_actions: np.ndarray, anchor: ExpertAnchor,
                 value_r: ValueNet, value_d: ValueNet, disc: Discriminator,
                 cfg: EngineConfig, rng_act: np.random.Generator,
                 rng_disc: np.random.Generator):
        if algo not in ALGO_RULES:
            raise ValueError(f"unknown engine algorithm {algo!r}; choose from {tuple(ALGO_RULES)}")
        if len(expert_obs) != len(expert_actions) or len(expert_obs) == 0:
            raise ValueError("expert pairs must be nonempty and aligned")
        self.algo = algo
        self.rules = ALGO_RULES[algo]
        self.policy = policy
        self.env = env
        self.expert_obs = np.asarray(expert_obs, dtype=np.float64)
        self.expert_actions = np.asarray(expert_actions)
        self.anchor = anchor
        self.value_r = value_r
        self.value_d = value_d
        self.disc = disc
        self.cfg = cfg
        self.rng_act = rng_act
        self.rng_disc = rng_disc
        self.opt_value_r = Adam(lr=cfg.value_lr)
        self.opt_value_d = Adam(lr=cfg.value_lr)
        self.opt_disc = Adam(lr=cfg.disc_lr)
        # gail is the dual pinned at exactly zero, never updated
        lam0 = 0.0 if algo == "gail" else cfg.lagrange_init
        self.lagrange = LagrangianState(lam=lam0, lr=cfg.lagrange_lr, mode=cfg.lagrange_mode)
        self.zero_cost = self.rules.zero_cost_channel or cfg.zero_cost_channel
        if cfg.limit_override is not None:
            self.limit = float(cfg.limit_override)
        elif self.rules.limit == "minimum":
            self.limit = anchor.lgail_limit
        else:
            self.limit = anchor.mean_cost
        self.iteration = 0
        self.total_steps = 0
        self.total_cost = 0.0

    # -- state management --------------------------------------------------

    def _snapshot(self) -> dict:
        return {
            "policy": self.policy.params.copy(),
            "value_r": self.value_r.params.copy(),
            "value_d": self.value_d.params.copy(),
            "disc": self.disc.params.copy(),
            "opt_value_r": self.opt_value_r.state_dict(),
            "opt_value_d": self.opt_value_d.state_dict(),
            "opt_disc": self.opt_disc.state_dict(),
            "lagrange": self.lagrange.snapshot(),
            "rng_act": self.rng_act.bit_generator.state,
            "rng_disc": self.rng_disc.bit_generator.state,
            "env": self.env.rng_state(),
            "counters": (self.iteration, self.total_steps, self.total_cost),
        }

    def _restore(self, snap: dict) -> None:
        self.policy.set_values(snap["policy"].values)
        self.value_r.set_values(snap["value_r"].values)
        self.value_d.set_values(snap["value_d"].values)
        self.disc.net.set_values(snap["disc"].values)
        self.opt_value_r.load_state_dict(snap["opt_value_r"])
        self.opt_value_d.load_state_dict(snap["opt_value_d"])
        self.opt_disc.load_state_dict(snap["opt_disc"])
        self.lagrange.restore(snap["lagrange"])
        self.rng_act.bit_generator.state = snap["rng_act"]
        self.rng_disc.bit_generator.state = snap["rng_disc"]
        self.env.set_rng_state(snap["env"])
        self.iteration, self.total_steps, self.total_cost = snap["counters"]

    def _assert_finite(self) -> None:
        for name, vec in (("policy", self.policy.params),
                          ("reward value net", self.value_r.params),
                          ("cost value net", self.value_d.params),
                          ("discriminator", self.disc.params)):
            if not np.all(np.isfinite(vec.values)):
                raise FloatingPointError(f"{name} parameters went non-finite")

    # -- one iteration -------------------------------------------------------

    def run_iteration(self) -> IterationRecord:
        snap = self._snapshot()
        try:
            return self._iterate()
        except BaseException:
            self._restore(snap)
            raise

    def _iterate(self) -> IterationRecord:
        cfg = self.cfg
        batch = collect(self.policy, self.env, cfg.batch_size, self.rng_act)
        label_surrogate_reward(batch, self.disc, cfg.convention)
        override = np.zeros(len(batch)) if self.zero_cost else None
        buf = build_advantages(batch, self.value_r, self.value_d, cfg.gamma,
                               cfg.gae_lam, costs_override=override)
        stats = batch.stats()
        j_k = stats.mean_episode_cost
        lam_used = self.lagrange.lam if self.rules.lagrangian else 0.0

        if self.rules.alternating:
            mode = cvag_branch(j_k, self.limit)
            spec = SurrogateSpec(mode=mode, lam=0.0, entropy_coef=cfg.policy_entropy)
        else:
            mode = "penalized"
            spec = SurrogateSpec(mode=mode, lam=lam_used, entropy_coef=cfg.policy_entropy)

        # the meta algorithm trains policy and values on the front split only
        if self.rules.meta_step:
            tr, va = split_by_episode(batch.dones, cfg.meta_train_frac)
        else:
            tr, va = slice(0, len(batch)), slice(0, 0)

        reports = []
        for _ in range(cfg.policy_passes):
            sb = SurrogateBatch(
                states=batch.obs[tr],
                actions=batch.actions[tr],
                logp_old=self.policy.logp(batch.obs[tr], batch.actions[tr]),
                adv_reward=buf.adv_reward[tr],
                adv_cost=buf.adv_cost[tr],
            )
            reports.append(trust_region_step(self.policy, sb, spec, cfg.trust))

        fit_value_networks(batch.obs[tr], buf.returns_reward[tr], buf.returns_cost[tr],
                           self.value_r, self.value_d, self.opt_value_r, self.opt_value_d,
                           epochs=cfg.value_epochs)

        disc_report = None
        for _ in range(cfg.disc_passes):
            eidx = self.rng_disc.integers(0, len(self.expert_obs), size=len(batch))
            disc_report = discriminator_update(
                self.disc, self.opt_disc,
                (batch.obs, batch.actions),
                (self.expert_obs[eidx], self.expert_actions[eidx]),
                entropy_coef=cfg.disc_entropy, convention=cfg.convention,
            )

        if self.rules.update_lambda:
            self.lagrange.update(j_k, self.limit)
            if self.rules.meta_step:
                if va.stop - va.start > 0:
                    grad = meta_lambda_gradient(buf.adv_reward_raw[va], batch.costs[va],
                                                self.lagrange.lam)
                    self.lagrange.lam = max(0.0, self.lagrange.lam - cfg.meta_lr * grad)
                else:
                    warnings.warn("empty validation split, meta step skipped", stacklevel=2)

        self._assert_finite()
        self.iteration += 1
        self.total_steps += stats.steps
        self.total_cost += stats.total_cost
        return IterationRecord(
            iteration=self.iteration,
            steps=self.total_steps,
            episodes=stats.episodes,
            mean_true_return=stats.mean_true_return,
            mean_cost=j_k,
            mean_surrogate_return=stats.mean_surrogate_return,
            lam=lam_used,
            kl=max(r.kl for r in reports),
            cost_rate=self.total_cost / self.total_steps,
            disc_loss=0.0 if disc_report is None else disc_report.loss_after,
            surrogate_mode=mode,
            accepted_passes=sum(r.accepted for r in reports),
            clip_fraction=batch.clip_fraction,
        )

    def run(self, iterations: int, *, early_stop: bool = True,
            stop_recovered: float = 95.0, stop_violation: float = 0.0,
            stop_patience: int = 20, on_record=None) -> list[IterationRecord]:
        """Run up to `iterations` iterations, stopping early once the policy has
        held the recovery/violation targets for `stop_patience` consecutive
        iterations."""
        records = []
        streak = 0
        for _ in range(iterations):
            record = self.run_iteration()
            records.append(record)
            if on_record is not None:
                on_record(record)
            hit = (recovered_return(record.mean_true_return, self.anchor.mean_return)
                   >= stop_recovered
                   and cost_violation(record.mean_cost, self.anchor.mean_cost)
                   <= stop_violation)
            streak = streak + 1 if hit else 0
            if early_stop and streak >= stop_patience:
                break
        return records


def build_learner(algo: str, env, expert_obs, expert_actions, anchor: ExpertAnchor,
                  *, cfg: EngineConfig = EngineConfig(), seed: int = 0,
                  hidden: tuple[int, ...] = (100, 100)) -> ImitationLearner:
    """Construct policy, value nets, and discriminator for `env` and wire them up.

    All streams derive from the master seed alone (never the algorithm name),
    so different algorithms on the same seed share environment and
    initialization randomness.
    """
    streams = np.random.SeedSequence(seed).spawn(5)
    rng_init_policy, rng_init_value, rng_init_disc, rng_act, rng_disc = (
        np.random.Generator(np.random.Philox(s)) for s in streams)
    obs_dim = env.spec.obs_dim
    space = env.spec.action_space
    if space[0] == "discrete":
        policy = CategoricalPolicy(obs_dim, hidden, space[1], rng=rng_init_policy)
        disc = Discriminator(obs_dim, hidden, n_actions=space[1], rng=rng_init_disc)
    else:
        policy = GaussianPolicy(obs_dim, hidden, space[1], rng=rng_init_policy)
        disc = Discriminator(obs_dim, hidden, act_dim=space[1], rng=rng_init_disc)
    value_r = ValueNet(obs_dim, hidden, rng=rng_init_value)
    value_d = ValueNet(obs_dim, hidden, rng=rng_init_value)
    return ImitationLearner(algo, policy, env, np.asarray(expert_obs),
                            np.asarray(expert_actions), anchor, value_r, value_d,
                            disc, cfg, rng_act, rng_disc)


# -- behavioral cloning ----------------------------------------------------


@dataclass
class BcResult:
    """Outcome of a cloning fit; the policy is left at the best checkpoint."""

    best_val_loss: float
    final_val_loss: float
    best_epoch: int
    val_losses: list[float]


def bc_train(policy, obs, actions, rng: np.random.Generator, *, epochs: int = 200,
             lr: float = 1e-3, batch_size: int = 256, train_frac: float = 0.7) -> BcResult:
    """Maximum-likelihood behavioral cloning with best-validation selection.

    Shuffles once into a 70/30 split, runs minibatch Adam on the negative
    log-likelihood, and restores the parameters of the epoch with the lowest
    validation loss.
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions)
    n = len(obs)
    if n != len(actions):
        raise ValueError("state and action arrays must align")
    if n < 10:
        raise ValueError("behavioral cloning needs at least 10 state-action pairs")
    order = rng.permutation(n)
    cut = int(n * train_frac)
    if cut == 0 or cut == n:
        raise ValueError("train fraction leaves one side of the split empty")
    tr, va = order[:cut], order[cut:]
    obs_tr, act_tr = obs[tr], actions[tr]
    obs_va, act_va = obs[va], actions[va]
    opt = Adam(lr=lr)

    def val_loss() -> float:
        return float(-np.mean(policy.logp(obs_va, act_va)))

    best_loss, best_params, best_epoch = math.inf, policy.params.copy(), 0
    val_losses = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(cut)
        for start in range(0, cut, batch_size):
            mb = perm[start:start + batch_size]
            grad = policy.weighted_logp_grad(obs_tr[mb], act_tr[mb],
                                             np.full(len(mb), -1.0 / len(mb)))
            policy.set_values(opt.step(policy.params.values, grad.values))
        loss = val_loss()
        val_losses.append(loss)
        if loss < best_loss:
            best_loss, best_params, best_epoch = loss, policy.params.copy(), epoch
    policy.set_values(best_params.values)
    return BcResult(best_loss, val_losses[-1], best_epoch, val_losses)


# -- policy evaluation -------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    mean_return: float
    mean_cost: float
    episode_returns: np.ndarray
    episode_costs: np.ndarray
    episode_lengths: np.ndarray

    @property
    def total_steps(self) -> int:
        return int(self.episode_lengths.sum())


def evaluate_policy(policy, env, episodes: int, rng: np.random.Generator) -> EvalReport:
    """Roll full episodes and report mean true return and cost."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rets, costs, lengths = [], [], []
    for _ in range(episodes):
        obs = env.reset()
        total_r = 0.0
        total_d = 0.0
        steps = 0
        done = False
        while not done:
            action, _ = policy.act(obs, rng)
            outcome = env.step(action)
            total_r += outcome.true_reward
            total_d += outcome.cost
            steps += 1
            obs = outcome.observation
            done = outcome.done
        rets.append(total_r)
        costs.append(total_d)
        lengths.append(steps)
    rets = np.array(rets)
    costs = np.array(costs)
    return EvalReport(float(rets.mean()), float(costs.mean()), rets, costs,
                      np.array(lengths, dtype=np.int64))
