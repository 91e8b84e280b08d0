"""Attention-weighted mixture policy over an inner actor and external knowledge.

A query network maps the state to ``u``; scores ``u . k_j / sqrt(d_k)`` against
one key per component (inner actor first, then knowledge ``g_1..g_n``) are
softmax-normalized into mixture weights ``w``. A straight-through Gumbel
sample picks one component and the action is drawn from that component's
tanh-squashed Gaussian. The density of an action is the full mixture density.

For gradients, the selected pre-squash sample is written as
``X = sum_j e_j x_j`` with ``e`` the hard one-hot sample in the forward pass
and the soft relaxation ``y = softmax((log w + g) / T)`` in the backward pass.
"""
from dataclasses import dataclass
import math

import numpy as np

from .approximators import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    SQUASH_EPS,
    GaussianHeadOutput,
    Mlp,
    MlpSpec,
    ShapeError,
    gaussian_log_density,
    init_params,
    squash_correction,
)
from .knowledge import D_K, KnowledgeSet, init_key


class PolicyConfigError(ValueError):
    pass


class DensityError(ValueError):
    pass


# --- weights, sampling, entropy ---------------------------------------------------------


@dataclass
class MixtureWeights:
    w: np.ndarray
    raw_scores: np.ndarray


def log_softmax(z):
    m = np.max(z, axis=-1, keepdims=True)
    return z - (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))


def logsumexp(s):
    m = np.max(s, axis=-1)
    return m + np.log(np.sum(np.exp(s - m[..., None]), axis=-1))


def attention_scores(u, keys):
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise PolicyConfigError("attention needs at least one key")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != keys.shape[1]:
        raise ShapeError(f"query length {u.shape[-1]} does not match key length {keys.shape[1]}")
    return u @ keys.T / math.sqrt(keys.shape[1])


def attention_weights(u, keys):
    """Scaled dot-product scores and their softmax, ordered [inner, g_1, ..., g_n]."""
    z = attention_scores(u, keys)
    return MixtureWeights(np.exp(log_softmax(z)), z)


def knowledge_sample(w, temperature, rng):
    """Hard one-hot straight-through Gumbel sample from simplex weights ``w``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    w = np.asarray(w.w if isinstance(w, MixtureWeights) else w, dtype=np.float64)
    e = np.zeros_like(w)
    certain = w == 1.0
    if certain.any(axis=-1).all():
        np.put_along_axis(e, np.argmax(certain, axis=-1)[..., None], 1.0, axis=-1)
        return e
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    g = rng.gumbel(size=w.shape)
    idx = np.argmax((logw + g) / temperature, axis=-1)
    np.put_along_axis(e, np.asarray(idx)[..., None], 1.0, axis=-1)
    return e


def categorical_entropy(w):
    """``-sum w log w`` over the last axis with ``0 log 0 = 0``."""
    w = np.asarray(w.w if isinstance(w, MixtureWeights) else w, dtype=np.float64)
    safe = np.where(w > 0.0, w, 1.0)
    return np.sum(np.where(w > 0.0, -w * np.log(safe), 0.0), axis=-1) + 0.0  # + 0.0 turns -0.0 into 0.0


@dataclass(frozen=True)
class BetaSchedule:
    """``beta_t = exp(-d_e * t) + c_e``; ``enabled=False`` turns the term off."""

    d_e: float = 1e-4
    c_e: float = 2e-4
    enabled: bool = True

    def __post_init__(self):
        if self.d_e < 0 or self.c_e < 0:
            raise PolicyConfigError("beta schedule needs d_e >= 0 and c_e >= 0")


def beta_at(schedule, t):
    if not schedule.enabled:
        return 0.0
    return math.exp(-schedule.d_e * t) + schedule.c_e


# --- policies -------------------------------------------------------------------------


@dataclass
class ActionDiagnostics:
    weights: MixtureWeights
    selected_index: int
    component_mean: np.ndarray
    component_std: np.ndarray
    log_prob: float


@dataclass
class Noise:
    xi: np.ndarray  # (B, n+1, d) for the mixture, (B, d) for the plain actor
    gumbel: np.ndarray = None  # (B, n+1) or None when there is a single component


@dataclass
class ActorLoss:
    loss: float
    grads: dict
    log_prob: np.ndarray
    weights: np.ndarray
    entropy_w: np.ndarray


def _check_open_cube(action):
    if not np.all(np.abs(action) < 1.0):
        raise DensityError("action must lie strictly inside (-1, 1)^d for a squashed density")


def _squash_grad(a):
    one_m = 1.0 - a * a
    return -2.0 * a * one_m / (one_m + SQUASH_EPS), one_m


class KianPolicy:
    """Mixture policy with a learnable query, keys and inner actor.

    ``params`` maps ``"query"``, ``"keys"`` (shape (n+1, d_k)) and ``"inner"`` to
    arrays; knowledge components are frozen and read from ``knowledge``.
    """

    kind = "kian"

    def __init__(self, layout, knowledge, inner_spec, query_spec, params, temperature=1.0):
        self.layout = layout
        self.knowledge = knowledge
        self.inner_spec = inner_spec
        self.query_spec = query_spec
        self.temperature = float(temperature)
        self.action_dim = layout.action_dim
        if inner_spec.output_dim != 2 * self.action_dim:
            raise ShapeError("inner actor must output mean and log-std for every action dimension")
        if inner_spec.input_dim != layout.obs_dim or query_spec.input_dim != layout.obs_dim:
            raise ShapeError("networks must take the task observation as input")
        self.d_k = query_spec.output_dim
        self._inner = Mlp(inner_spec)
        self._query = Mlp(query_spec)
        self.params = params
        if params["keys"].shape != (knowledge.n + 1, self.d_k):
            raise ShapeError(f"keys must have shape {(knowledge.n + 1, self.d_k)}, got {params['keys'].shape}")

    @classmethod
    def create(cls, layout, knowledge, streams, inner_hidden=(512, 512, 512), query_hidden=(64, 64, 64),
               activation="relu", temperature=1.0, d_k=D_K):
        """Fresh parameters; ``streams(name)`` returns the generator for a named init stream."""
        inner_spec = MlpSpec(layout.obs_dim, tuple(inner_hidden), 2 * layout.action_dim, activation)
        query_spec = MlpSpec(layout.obs_dim, tuple(query_hidden), d_k, activation)
        k_in = init_key(streams("init.keys"), d_k)
        keys = np.vstack([k_in[None, :], knowledge.key_matrix().reshape(-1, d_k)])
        params = {
            "query": init_params(query_spec, streams("init.query")),
            "keys": keys,
            "inner": init_params(inner_spec, streams("init.inner")),
        }
        return cls(layout, knowledge, inner_spec, query_spec, params, temperature)

    @property
    def n(self):
        return self.knowledge.n

    def param_groups(self):
        return self.params

    def knowledge_with_trained_keys(self):
        return self.knowledge.with_keys(self.params["keys"][1:])

    # forward pieces

    def _weights(self, params, obs):
        u, qcache = self._query.forward_train(params["query"], obs)
        z = attention_scores(u, params["keys"])
        return u, qcache, z, log_softmax(z)

    def weights(self, obs):
        _, _, z, logw = self._weights(self.params, np.atleast_2d(obs))
        return MixtureWeights(np.exp(logw), z)

    def _inner_head(self, params, obs):
        out, icache = self._inner.forward_train(params["inner"], obs)
        return GaussianHeadOutput.from_network(out, self.action_dim), icache

    def draw_noise(self, batch, rng):
        xi = rng.standard_normal((batch, self.n + 1, self.action_dim))
        gumbel = rng.gumbel(size=(batch, self.n + 1)) if self.n > 0 else None
        return Noise(xi, gumbel)

    def _select(self, logw, noise):
        if noise.gumbel is None:
            b = logw.shape[0]
            return np.zeros(b, dtype=np.intp), np.ones((b, 1))
        v = (logw + noise.gumbel) / self.temperature
        return np.argmax(v, axis=-1), np.exp(log_softmax(v))

    def _component_logdens(self, X, head, kloc, klog):
        l_in = gaussian_log_density(X, head.mean, head.log_std)
        if self.n == 0:
            return l_in[:, None]
        l_kn = gaussian_log_density(X[:, None, :], kloc, klog)
        return np.concatenate([l_in[:, None], l_kn], axis=1)

    # public API

    def act(self, obs, rng, deterministic=False):
        """One action for a single observation plus diagnostics."""
        obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs2.shape != (1, self.layout.obs_dim):
            raise ShapeError(f"expected one observation of length {self.layout.obs_dim}, got {np.shape(obs)}")
        _, _, z, logw = self._weights(self.params, obs2)
        head, _ = self._inner_head(self.params, obs2)
        kloc, klog = self.knowledge.distributions(obs2, self.layout)
        w = np.exp(logw)
        if deterministic:
            idx = int(np.argmax(w[0]))
            loc, log_std = self._component(idx, head, kloc, klog)
            action = np.tanh(loc)
        else:
            noise = self.draw_noise(1, rng)
            sel, _ = self._select(logw, noise)
            idx = int(sel[0])
            loc, log_std = self._component(idx, head, kloc, klog)
            action = np.tanh(loc + np.exp(log_std) * noise.xi[0, idx])
        with np.errstate(divide="ignore"):
            lp = float(self._log_prob_at(np.arctanh(np.clip(action, -1 + 1e-15, 1 - 1e-15))[None, :],
                                         action[None, :], logw, head, kloc, klog)[0])
        diag = ActionDiagnostics(MixtureWeights(w[0], z[0]), idx, np.tanh(loc), np.exp(log_std), lp)
        return action, diag

    def _component(self, idx, head, kloc, klog):
        if idx == 0:
            return head.mean[0], head.log_std[0]
        return kloc[0, idx - 1], klog[0, idx - 1]

    def _log_prob_at(self, X, action, logw, head, kloc, klog):
        s = logw + self._component_logdens(X, head, kloc, klog)
        return logsumexp(s) - squash_correction(action)

    def mixture_log_prob(self, obs, action):
        """``log sum_j w_j p_j(action | obs)`` for a batch or a single pair."""
        obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        action2 = np.atleast_2d(np.asarray(action, dtype=np.float64))
        _check_open_cube(action2)
        _, _, _, logw = self._weights(self.params, obs2)
        head, _ = self._inner_head(self.params, obs2)
        kloc, klog = self.knowledge.distributions(obs2, self.layout)
        lp = self._log_prob_at(np.arctanh(action2), action2, logw, head, kloc, klog)
        return lp if np.ndim(action) == 2 else float(lp[0])

    def sample(self, obs, rng):
        """Batch of stochastic actions and their mixture log-probs (no gradients)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        noise = self.draw_noise(obs.shape[0], rng)
        _, _, _, logw = self._weights(self.params, obs)
        head, _ = self._inner_head(self.params, obs)
        kloc, klog = self.knowledge.distributions(obs, self.layout)
        idx, _ = self._select(logw, noise)
        X = self._selected_presquash(idx, head, kloc, klog, noise)
        action = np.tanh(X)
        return action, self._log_prob_at(X, action, logw, head, kloc, klog)

    def _selected_presquash(self, idx, head, kloc, klog, noise):
        x_in = head.mean + np.exp(head.log_std) * noise.xi[:, 0]
        if self.n == 0:
            return x_in
        x_kn = kloc + np.exp(klog) * noise.xi[:, 1:]
        x_all = np.concatenate([x_in[:, None], x_kn], axis=1)
        return x_all[np.arange(x_all.shape[0]), idx]

    def greedy_action(self, obs):
        return self.act(obs, None, deterministic=True)[0]

    def actor_loss(self, obs, noise, critic_fn, alpha, beta, params=None, soft_ref=None, need_grad=True):
        """Mean of ``alpha log pi(a|s) - min Q(s, a) - beta H(w(s))`` and its gradient.

        ``critic_fn(obs, action)`` returns ``(q_min, dq_min/da)``. With
        ``soft_ref`` (the soft weights at the reference parameters) the
        forward value uses ``e + y - soft_ref`` as mixing coefficients, the
        surrogate whose exact gradient is the straight-through estimate.
        """
        p = self.params if params is None else params
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        B, d, N = obs.shape[0], self.action_dim, self.n + 1
        u, qcache, z, logw = self._weights(p, obs)
        w = np.exp(logw)
        head, icache = self._inner_head(p, obs)
        std_in = np.exp(head.log_std)
        x_in = head.mean + std_in * noise.xi[:, 0]
        kloc, klog = self.knowledge.distributions(obs, self.layout)
        idx, y = self._select(logw, noise)
        rows = np.arange(B)
        if N > 1:
            kstd = np.exp(klog)
            x_kn = kloc + kstd * noise.xi[:, 1:]
            x_all = np.concatenate([x_in[:, None], x_kn], axis=1)
        if soft_ref is None:
            coef = None
            X = x_in if N == 1 else x_all[rows, idx]
        else:
            coef = np.zeros((B, N))
            coef[rows, idx] = 1.0
            coef = coef + (y - soft_ref)
            X = coef[:, 0, None] * x_in if N == 1 else np.einsum("bn,bnd->bd", coef, x_all)
        a = np.tanh(X)
        ldens = self._component_logdens(X, head, kloc, klog)
        s = logw + ldens
        lse = logsumexp(s)
        log_pi = lse - squash_correction(a)
        q, dq_da = critic_fn(obs, a)
        H = -np.sum(w * logw, axis=-1)
        loss = float(np.mean(alpha * log_pi - q - beta * H))
        if not need_grad:
            return ActorLoss(loss, None, log_pi, w, H)

        r = np.exp(s - lse[:, None])
        z_in = (X - head.mean) / std_in
        dC, one_m = _squash_grad(a)
        dlog_dX = r[:, 0, None] * (-z_in / std_in)
        if N > 1:
            z_kn = (X[:, None, :] - kloc) / kstd
            dlog_dX = dlog_dX + np.sum(r[:, 1:, None] * (-z_kn / kstd), axis=1)
        gX = alpha * (dlog_dX - dC) - dq_da * one_m

        e_in = 1.0 if coef is None else coef[:, 0, None]
        gx_in = gX if coef is None else gX * e_in
        if coef is None and N > 1:
            gx_in = gX * (idx == 0)[:, None]
        g_mean = gx_in + alpha * (r[:, 0, None] * (z_in / std_in))
        g_logstd = gx_in * std_in * noise.xi[:, 0] + alpha * (r[:, 0, None] * (z_in * z_in - 1.0))
        g_logstd = g_logstd * head.log_std_mask()
        grads = {}
        upstream = np.concatenate([g_mean, g_logstd], axis=1) / B
        grads["inner"], _ = self._inner.backward(p["inner"], icache, upstream, need_input=False)

        # mixture weights: log-sum-exp, soft relaxation and categorical entropy
        g_logw = alpha * r + beta * w * (logw + 1.0)
        if N > 1:
            g_y = np.einsum("bd,bnd->bn", gX, x_all)
            g_v = y * (g_y - np.sum(y * g_y, axis=-1, keepdims=True))
            g_logw = g_logw + g_v / self.temperature
        g_z = (g_logw - w * np.sum(g_logw, axis=-1, keepdims=True)) / B
        scale = 1.0 / math.sqrt(self.d_k)
        grads["keys"] = (g_z.T @ u) * scale
        g_u = (g_z @ p["keys"]) * scale
        grads["query"], _ = self._query.backward(p["query"], qcache, g_u, need_input=False)
        return ActorLoss(loss, grads, log_pi, w, H)


class GaussianActor:
    """Plain tanh-Gaussian SAC actor (the no-knowledge baseline)."""

    kind = "sac"
    n = 0

    def __init__(self, layout, inner_spec, params):
        self.layout = layout
        self.inner_spec = inner_spec
        self.action_dim = layout.action_dim
        self._inner = Mlp(inner_spec)
        self.params = params

    @classmethod
    def create(cls, layout, streams, inner_hidden=(512, 512, 512), activation="relu"):
        spec = MlpSpec(layout.obs_dim, tuple(inner_hidden), 2 * layout.action_dim, activation)
        return cls(layout, spec, {"inner": init_params(spec, streams("init.inner"))})

    def param_groups(self):
        return self.params

    def _head(self, params, obs):
        out, cache = self._inner.forward_train(params["inner"], obs)
        return GaussianHeadOutput.from_network(out, self.action_dim), cache

    def weights(self, obs):
        b = np.atleast_2d(obs).shape[0]
        return MixtureWeights(np.ones((b, 1)), np.zeros((b, 1)))

    def act(self, obs, rng, deterministic=False):
        obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        head, _ = self._head(self.params, obs2)
        if deterministic:
            pre = head.mean
        else:
            xi = rng.standard_normal((1, self.action_dim))
            pre = head.mean + np.exp(head.log_std) * xi
        action = np.tanh(pre)
        lp = gaussian_log_density(pre, head.mean, head.log_std) - squash_correction(action)
        diag = ActionDiagnostics(MixtureWeights(np.ones(1), np.zeros(1)), 0, np.tanh(head.mean[0]),
                                 np.exp(head.log_std[0]), float(lp[0]))
        return action[0], diag

    def greedy_action(self, obs):
        return self.act(obs, None, deterministic=True)[0]

    def mixture_log_prob(self, obs, action):
        obs2 = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        action2 = np.atleast_2d(np.asarray(action, dtype=np.float64))
        _check_open_cube(action2)
        head, _ = self._head(self.params, obs2)
        lp = gaussian_log_density(np.arctanh(action2), head.mean, head.log_std) - squash_correction(action2)
        return lp if np.ndim(action) == 2 else float(lp[0])

    def sample(self, obs, rng):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        xi = rng.standard_normal((obs.shape[0], self.action_dim))
        head, _ = self._head(self.params, obs)
        x = head.mean + np.exp(head.log_std) * xi
        action = np.tanh(x)
        return action, gaussian_log_density(x, head.mean, head.log_std) - squash_correction(action)

    def draw_noise(self, batch, rng):
        return Noise(rng.standard_normal((batch, self.action_dim)))

    def actor_loss(self, obs, noise, critic_fn, alpha, beta=0.0, params=None, soft_ref=None, need_grad=True):
        p = self.params if params is None else params
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        B = obs.shape[0]
        xi = noise.xi.reshape(B, self.action_dim)
        head, cache = self._head(p, obs)
        std = np.exp(head.log_std)
        x = head.mean + std * xi
        a = np.tanh(x)
        log_pi = gaussian_log_density(x, head.mean, head.log_std) - squash_correction(a)
        q, dq_da = critic_fn(obs, a)
        loss = float(np.mean(alpha * log_pi - q))
        ones = np.ones((B, 1))
        if not need_grad:
            return ActorLoss(loss, None, log_pi, ones, np.zeros(B))
        z = (x - head.mean) / std
        dC, one_m = _squash_grad(a)
        gX = alpha * ((-z / std) - dC) - dq_da * one_m
        g_mean = gX + alpha * (z / std)
        g_logstd = gX * std * xi + alpha * (z * z - 1.0)
        g_logstd = g_logstd * head.log_std_mask()
        upstream = np.concatenate([g_mean, g_logstd], axis=1) / B
        grad, _ = self._inner.backward(p["inner"], cache, upstream, need_input=False)
        return ActorLoss(loss, {"inner": grad}, log_pi, ones, np.zeros(B))


__all__ = [
    "ActionDiagnostics", "BetaSchedule", "GaussianActor", "KianPolicy", "MixtureWeights", "Noise",
    "attention_weights", "beta_at", "categorical_entropy", "knowledge_sample", "log_softmax",
    "logsumexp", "LOG_STD_MAX", "LOG_STD_MIN", "KnowledgeSet",
]
