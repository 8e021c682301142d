"""Dense tanh networks with hand-written reverse-mode gradients.

One MLP class owns the shared feedforward stack (forward, backward,
forward-tangent) over a flat ParamVector; the policy, value, and
discriminator heads add their distribution math on top: log-probabilities,
entropies, KL divergences, and Fisher-vector products for the trust-region
step.  Everything is float64 numpy, nothing is stochastic except sampling.
"""

from __future__ import annotations

import math

import numpy as np

from .params import BlockShape, ParamVector, StaleCacheError

LOG_2PI = math.log(2.0 * math.pi)
D_CLAMP = 1e-6  # discriminator outputs live in [D_CLAMP, 1 - D_CLAMP]


def _init_values(manifest, rng, final_scale: float, n_layers: int) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases and extras."""
    pv = ParamVector.zeros(manifest)
    for i in range(n_layers):
        w = pv.block(f"W{i}")
        bound = math.sqrt(3.0 / w.shape[0])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
        if i == n_layers - 1:
            w *= final_scale
    return pv.values


class MlpNet:
    """Tanh MLP: linear output head, float64 throughout."""

    #: extra (name, rows, cols) parameter blocks appended after the stack
    EXTRA_BLOCKS: tuple[tuple[str, int, int], ...] = ()
    #: scale applied to the final layer's weights at init
    FINAL_SCALE = 1.0

    def __init__(
        self,
        in_dim: int,
        hidden: tuple[int, ...],
        out_dim: int,
        *,
        rng: np.random.Generator | None = None,
        params: ParamVector | None = None,
    ):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        widths = [in_dim, *self.hidden, out_dim]
        self.n_layers = len(widths) - 1
        manifest = []
        for i in range(self.n_layers):
            manifest.append(BlockShape(f"W{i}", widths[i], widths[i + 1]))
            manifest.append(BlockShape(f"b{i}", 1, widths[i + 1]))
        for name, rows, cols in self._extra_blocks():
            manifest.append(BlockShape(name, rows, cols))
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng to initialize")
            params = ParamVector(
                _init_values(manifest, rng, self.FINAL_SCALE, self.n_layers), manifest
            )
        else:
            if tuple(params.manifest) != tuple(manifest):
                raise ValueError("parameter manifest does not match architecture")
        self.params = params
        self._cache: tuple | None = None

    def _extra_blocks(self) -> tuple[tuple[str, int, int], ...]:
        return self.EXTRA_BLOCKS

    # -- parameter plumbing -------------------------------------------------

    def clone(self) -> "MlpNet":
        return type(self)(self.in_dim, self.hidden, self.out_dim, params=self.params.copy())

    def set_values(self, values: np.ndarray) -> None:
        self.params = ParamVector(np.array(values, dtype=np.float64), self.params.manifest)
        self._cache = None

    def grad_zeros(self) -> ParamVector:
        return self.params.zeros_like()

    # -- forward / reverse / tangent ----------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batch forward pass; caches activations for backward/jvp."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (N, {self.in_dim}) input, got {x.shape}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params.block(f"W{i}") + self.params.block(f"b{i}")
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        self._cache = (x, acts)
        return h

    def _cached_acts(self, x: np.ndarray) -> list[np.ndarray]:
        if self._cache is None:
            raise StaleCacheError("no forward pass cached")
        cx, acts = self._cache
        if cx is not x and not (cx.shape == np.shape(x) and np.array_equal(cx, x)):
            raise StaleCacheError("cached activations belong to a different batch")
        return acts

    def backward(self, x: np.ndarray, dout: np.ndarray) -> ParamVector:
        """Gradient of sum(dout * out) w.r.t. the parameters.

        Requires a prior forward pass on the same batch; extras get zero grad.
        """
        acts = self._cached_acts(x)
        grad = self.grad_zeros()
        dz = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            grad.block(f"W{i}")[:] = acts[i].T @ dz
            grad.block(f"b{i}")[:] = dz.sum(axis=0)
            if i > 0:
                da = dz @ self.params.block(f"W{i}").T
                dz = da * (1.0 - acts[i] ** 2)  # tanh'(z) = 1 - tanh(z)^2
        return grad

    def jvp(self, x: np.ndarray, v: ParamVector) -> np.ndarray:
        """Forward-tangent pass: directional derivative of the output in v."""
        acts = self._cached_acts(x)
        t = np.zeros_like(acts[0])
        for i in range(self.n_layers):
            t = t @ self.params.block(f"W{i}") + acts[i] @ v.block(f"W{i}") + v.block(f"b{i}")
            if i < self.n_layers - 1:
                t = t * (1.0 - acts[i + 1] ** 2)
        return t


class ValueNet(MlpNet):
    """Scalar state-value head."""

    def __init__(self, in_dim, hidden, *, rng=None, params=None):
        super().__init__(in_dim, hidden, 1, rng=rng, params=params)

    def clone(self) -> "ValueNet":
        return ValueNet(self.in_dim, self.hidden, params=self.params.copy())

    def value(self, states: np.ndarray) -> np.ndarray:
        return self.forward(states)[:, 0]

    def mse_and_grad(self, states: np.ndarray, targets: np.ndarray) -> tuple[float, ParamVector]:
        """Mean squared error against targets and its parameter gradient."""
        v = self.value(states)
        err = v - np.asarray(targets, dtype=np.float64)
        loss = float(np.mean(err**2))
        grad = self.backward(states, (2.0 * err / err.size)[:, None])
        return loss, grad


class DiscriminatorNet(MlpNet):
    """Sigmoid head over (state, action) rows, output clamped away from {0,1}."""

    def __init__(self, in_dim, hidden, *, rng=None, params=None):
        super().__init__(in_dim, hidden, 1, rng=rng, params=params)
        self._prob_cache: tuple | None = None

    def clone(self) -> "DiscriminatorNet":
        return DiscriminatorNet(self.in_dim, self.hidden, params=self.params.copy())

    def prob(self, x: np.ndarray) -> np.ndarray:
        z = self.forward(x)[:, 0]
        # overflow-safe sigmoid
        raw = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        d = np.clip(raw, D_CLAMP, 1.0 - D_CLAMP)
        self._prob_cache = (x, raw, d)
        return d

    def grad_from_dprob(self, x: np.ndarray, dprob: np.ndarray) -> ParamVector:
        """Chain an upstream dL/dD through clamp and sigmoid to the parameters."""
        if self._prob_cache is None or self._prob_cache[0] is not x:
            raise StaleCacheError("prob() not cached for this batch")
        _, raw, d = self._prob_cache
        live = (raw == d)  # clamped outputs have zero derivative
        dz = np.asarray(dprob, dtype=np.float64) * live * raw * (1.0 - raw)
        return self.backward(x, dz[:, None])


class GaussianPolicy(MlpNet):
    """Diagonal Gaussian policy: network mean, state-independent log-std."""

    FINAL_SCALE = 0.01

    def __init__(self, obs_dim, hidden, act_dim, *, rng=None, params=None):
        self.act_dim = act_dim
        super().__init__(obs_dim, hidden, act_dim, rng=rng, params=params)

    def _extra_blocks(self):
        return (("log_std", 1, self.out_dim),)

    def clone(self) -> "GaussianPolicy":
        return GaussianPolicy(self.in_dim, self.hidden, self.out_dim, params=self.params.copy())

    @property
    def log_std(self) -> np.ndarray:
        return self.params.block("log_std")[0]

    def mean(self, states: np.ndarray) -> np.ndarray:
        return self.forward(states)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        mu = self.forward(obs[None, :])[0]
        std = np.exp(self.log_std)
        action = mu + std * rng.standard_normal(self.out_dim)
        return action, self._logp_given(mu[None, :], action[None, :])[0]

    def _logp_given(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        u = self.log_std
        zed = (actions - mu) / np.exp(u)
        return -0.5 * np.sum(zed**2, axis=1) - np.sum(u) - 0.5 * self.out_dim * LOG_2PI

    def logp(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self._logp_given(self.forward(states), np.asarray(actions, dtype=np.float64))

    def weighted_logp_grad(self, states, actions, weights) -> ParamVector:
        """Gradient of sum_i w_i log pi(a_i|s_i)."""
        mu = self.forward(states)
        actions = np.asarray(actions, dtype=np.float64)
        w = np.asarray(weights, dtype=np.float64)[:, None]
        var = np.exp(2.0 * self.log_std)
        diff = actions - mu
        grad = self.backward(states, w * diff / var)
        # d logp / d u_k = ((a_k - mu_k)/sigma_k)^2 - 1
        grad.block("log_std")[0, :] = np.sum(w * (diff**2 / var - 1.0), axis=0)
        return grad

    def entropy(self, states=None) -> float:
        """Differential entropy; state-independent for this head."""
        return float(np.sum(self.log_std) + 0.5 * self.out_dim * (1.0 + LOG_2PI))

    def entropy_grad(self, states=None) -> ParamVector:
        grad = self.grad_zeros()
        grad.block("log_std")[:] = 1.0
        return grad

    def mean_kl(self, old: "GaussianPolicy", states: np.ndarray) -> float:
        """Mean over states of KL(self || old)."""
        mu_n = self.forward(states)
        mu_o = old.forward(states)
        u_n, u_o = self.log_std, old.log_std
        var_ratio = np.exp(2.0 * (u_n - u_o))
        per_dim = u_o - u_n + 0.5 * (var_ratio - 1.0)
        quad = 0.5 * (mu_n - mu_o) ** 2 / np.exp(2.0 * u_o)
        return float(np.mean(np.sum(quad, axis=1)) + np.sum(per_dim))

    def kl_grad(self, old: "GaussianPolicy", states: np.ndarray) -> ParamVector:
        n = states.shape[0]
        mu_n = self.forward(states)
        mu_o = old.forward(states)
        grad = self.backward(states, (mu_n - mu_o) / np.exp(2.0 * old.log_std) / n)
        grad.block("log_std")[0, :] = -1.0 + np.exp(2.0 * (self.log_std - old.log_std))
        return grad

    def fvp(self, states: np.ndarray, v: ParamVector, damping: float) -> ParamVector:
        """(H + damping I) v with H the Hessian of mean KL at the current policy.

        Mean-path curvature is J^T diag(1/sigma^2) J / N; the log-std block
        decouples with constant curvature 2 per coordinate.
        """
        n = states.shape[0]
        self.forward(states)
        t_mu = self.jvp(states, v)
        hv = self.backward(states, t_mu / np.exp(2.0 * self.log_std) / n)
        hv.block("log_std")[:] = 2.0 * v.block("log_std")
        hv.values += damping * v.values
        return hv


class CategoricalPolicy(MlpNet):
    """Softmax policy over a discrete action set."""

    FINAL_SCALE = 0.01

    def __init__(self, obs_dim, hidden, n_actions, *, rng=None, params=None):
        super().__init__(obs_dim, hidden, n_actions, rng=rng, params=params)

    def clone(self) -> "CategoricalPolicy":
        return CategoricalPolicy(self.in_dim, self.hidden, self.out_dim, params=self.params.copy())

    def probs(self, states: np.ndarray) -> np.ndarray:
        z = self.forward(states)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        p = self.probs(obs[None, :])[0]
        a = int(np.searchsorted(np.cumsum(p), rng.random()))
        a = min(a, self.out_dim - 1)
        return a, float(np.log(p[a]))

    def logp(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = self.forward(states)
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        idx = np.asarray(actions, dtype=np.int64)
        return z[np.arange(z.shape[0]), idx] - lse

    def weighted_logp_grad(self, states, actions, weights) -> ParamVector:
        p = self.probs(states)
        idx = np.asarray(actions, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        # d logp_a / dz = onehot(a) - p
        dz = -p * w[:, None]
        dz[np.arange(p.shape[0]), idx] += w
        return self.backward(states, dz)

    def entropy(self, states: np.ndarray) -> float:
        p = self.probs(states)
        return float(np.mean(-np.sum(p * np.log(p + 1e-300), axis=1)))

    def entropy_grad(self, states: np.ndarray) -> ParamVector:
        n = states.shape[0]
        p = self.probs(states)
        logp = np.log(p + 1e-300)
        h = -np.sum(p * logp, axis=1, keepdims=True)
        return self.backward(states, -p * (logp + h) / n)

    def mean_kl(self, old: "CategoricalPolicy", states: np.ndarray) -> float:
        p = self.probs(states)
        q = old.probs(states)
        return float(np.mean(np.sum(p * (np.log(p + 1e-300) - np.log(q + 1e-300)), axis=1)))

    def kl_grad(self, old: "CategoricalPolicy", states: np.ndarray) -> ParamVector:
        n = states.shape[0]
        p = self.probs(states)
        q = old.probs(states)
        diff = np.log(p + 1e-300) - np.log(q + 1e-300)
        kl = np.sum(p * diff, axis=1, keepdims=True)
        return self.backward(states, p * (diff - kl) / n)

    def fvp(self, states: np.ndarray, v: ParamVector, damping: float) -> ParamVector:
        """(H + damping I) v; softmax curvature diag(p) - p p^T per state."""
        n = states.shape[0]
        p = self.probs(states)
        t = self.jvp(states, v)
        m = p * t - p * np.sum(p * t, axis=1, keepdims=True)
        hv = self.backward(states, m / n)
        hv.values += damping * v.values
        return hv


def fisher_vector_product(policy, states, v: ParamVector, damping: float) -> ParamVector:
    """Curvature-vector product of the mean-KL Hessian at the current policy."""
    return policy.fvp(states, v, damping)
