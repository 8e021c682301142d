"""Occupancy discriminator: loss, single ascent step, causal entropy.

The discriminator scores (state, action) pairs; discrete actions enter as
one-hot columns next to the observation, continuous actions enter raw.  The
operative objective gives the learner term log D and the expert term
log(1 - D); the discriminator ascends it, so D drifts toward 1 on learner
pairs and 0 on expert pairs, and -log D rewards expert-like behavior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import DiscriminatorNet
from .params import Adam, ParamVector


def pair_design(obs: np.ndarray, actions: np.ndarray, n_actions: int | None) -> np.ndarray:
    """Rows of (observation, action embedding) for the discriminator."""
    obs = np.asarray(obs, dtype=np.float64)
    if n_actions is None:
        return np.concatenate([obs, np.asarray(actions, dtype=np.float64)], axis=1)
    onehot = np.zeros((obs.shape[0], n_actions))
    onehot[np.arange(obs.shape[0]), np.asarray(actions, dtype=np.int64)] = 1.0
    return np.concatenate([obs, onehot], axis=1)


class Discriminator:
    """DiscriminatorNet plus the action embedding it was built for."""

    def __init__(self, obs_dim: int, hidden: tuple[int, ...], *,
                 n_actions: int | None = None, act_dim: int | None = None,
                 rng: np.random.Generator | None = None, params: ParamVector | None = None):
        if (n_actions is None) == (act_dim is None):
            raise ValueError("give exactly one of n_actions (discrete) or act_dim (box)")
        self.n_actions = n_actions
        in_dim = obs_dim + (n_actions if n_actions is not None else act_dim)
        self.net = DiscriminatorNet(in_dim, hidden, rng=rng, params=params)

    @property
    def params(self) -> ParamVector:
        return self.net.params

    def prob_pairs(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.net.prob(pair_design(obs, actions, self.n_actions))


@dataclass
class DiscriminatorReport:
    loss_before: float
    loss_after: float
    mean_d_learner: float
    mean_d_expert: float


def _loss_terms(d_learner: np.ndarray, d_expert: np.ndarray, convention: str) -> float:
    if convention == "objective":
        return float(np.mean(np.log(d_learner)) + np.mean(np.log(1.0 - d_expert)))
    if convention == "swapped":
        return float(np.mean(np.log(1.0 - d_learner)) + np.mean(np.log(d_expert)))
    raise ValueError(f"unknown discriminator convention {convention!r}")


def discriminator_loss(disc: Discriminator, learner: tuple, expert: tuple,
                       convention: str = "objective") -> float:
    """E_learner[log D] + E_expert[log(1-D)] under the operative convention."""
    d_l = disc.prob_pairs(*learner)
    d_e = disc.prob_pairs(*expert)
    return _loss_terms(d_l, d_e, convention)


def discriminator_gradient(disc: Discriminator, learner: tuple, expert: tuple,
                           entropy_coef: float = 1e-3, convention: str = "objective"
                           ) -> tuple[float, ParamVector, float, float]:
    """Ascent gradient of loss + entropy_coef * mean Bernoulli output entropy.

    The entropy term averages over both batches and nudges the discriminator
    away from saturation.  Returns (loss, gradient, mean D learner, mean D expert).
    """
    x_l = pair_design(learner[0], learner[1], disc.n_actions)
    x_e = pair_design(expert[0], expert[1], disc.n_actions)
    n_l, n_e = x_l.shape[0], x_e.shape[0]

    d_l = disc.net.prob(x_l)
    if convention == "objective":
        dloss_l = 1.0 / d_l / n_l  # d/dD of mean log D
    else:
        dloss_l = -1.0 / (1.0 - d_l) / n_l
    # dH/dD for H = -(D log D + (1-D) log(1-D))
    dent_l = np.log((1.0 - d_l) / d_l) / (n_l + n_e)
    grad = disc.net.grad_from_dprob(x_l, dloss_l + entropy_coef * dent_l)

    d_e = disc.net.prob(x_e)
    if convention == "objective":
        dloss_e = -1.0 / (1.0 - d_e) / n_e
    else:
        dloss_e = 1.0 / d_e / n_e
    dent_e = np.log((1.0 - d_e) / d_e) / (n_l + n_e)
    grad.values += disc.net.grad_from_dprob(x_e, dloss_e + entropy_coef * dent_e).values

    loss = _loss_terms(d_l, d_e, convention)
    return loss, grad, float(d_l.mean()), float(d_e.mean())


def discriminator_update(disc: Discriminator, opt: Adam, learner: tuple, expert: tuple,
                         entropy_coef: float = 1e-3,
                         convention: str = "objective") -> DiscriminatorReport:
    """One Adam ascent step on the regularized loss."""
    loss_before, grad, mean_l, mean_e = discriminator_gradient(
        disc, learner, expert, entropy_coef, convention
    )
    disc.net.set_values(opt.step(disc.net.params.values, grad.values, direction="ascent"))
    loss_after = discriminator_loss(disc, learner, expert, convention)
    return DiscriminatorReport(loss_before, loss_after, mean_l, mean_e)


def causal_entropy(policy, states: np.ndarray) -> float:
    """Mean policy entropy over visited states (analytic per head)."""
    return policy.entropy(states)
