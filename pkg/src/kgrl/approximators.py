"""Small differentiable function approximators on flat float64 parameter vectors.

A parameter vector for an :class:`MlpSpec` is a 1-D ``float64`` array holding,
layer by layer, the weight matrix (shape ``(out, in)``, row-major) followed by
the bias vector. :meth:`MlpSpec.offsets` gives the exact positions.
"""
from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from . import kernels

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_ACTIVATIONS = {"relu": kernels.ACT_RELU, "tanh": kernels.ACT_TANH}


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ShapeError(f"all layer sizes must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}, got {self.activation!r}")

    @property
    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self):
        return sum(o * i + o for i, o in self.layer_dims)

    def offsets(self):
        """Per layer ``(weight_start, bias_start, end)`` offsets into the flat vector."""
        out, pos = [], 0
        for i, o in self.layer_dims:
            out.append((pos, pos + o * i, pos + o * i + o))
            pos += o * i + o
        return out

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["output_dim"]), d.get("activation", "relu"))


def init_params(spec, rng):
    """Uniform in +-1/sqrt(fan_in) for every weight and bias."""
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks).astype(np.float64)


def unpack(spec, params):
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    for (fan_in, fan_out), (w0, b0, end) in zip(spec.layer_dims, spec.offsets()):
        layers.append((params[w0:b0].reshape(fan_out, fan_in), params[b0:end]))
    return layers


class Mlp:
    """Forward/backward driver for one :class:`MlpSpec`.

    ``forward_train`` keeps the per-layer activations so a later ``backward``
    does not recompute the forward pass.
    """

    def __init__(self, spec, backend=None):
        self.spec = spec
        if backend is None:
            self._fwd, self._bwd = kernels.dense_forward, kernels.dense_backward
        else:
            self._fwd, self._bwd = kernels.get_backend(backend)
        n_hidden = len(spec.hidden_dims)
        hidden_act = _ACTIVATIONS[spec.activation]
        self._acts = [hidden_act] * n_hidden + [kernels.ACT_LINEAR]

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"input must have trailing dimension {self.spec.input_dim}, got shape {x.shape}")
        return np.ascontiguousarray(x), single

    def forward_train(self, params, x):
        x, single = self._prepare(x)
        layers = unpack(self.spec, params)
        cache = [x]
        h = x
        for idx, ((W, b), act) in enumerate(zip(layers, self._acts)):
            h, finite = self._fwd(h, W, b, act)
            if not finite:
                raise NumericError(f"non-finite activation in layer {idx}", layer=idx)
            cache.append(h)
        return (h[0] if single else h), (cache, single)

    def forward(self, params, x):
        return self.forward_train(params, x)[0]

    def backward(self, params, cache, upstream, need_input=True):
        acts, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} does not match output {acts[-1].shape}")
        g = np.ascontiguousarray(g)
        layers = unpack(self.spec, params)
        grad = np.empty(self.spec.n_params)
        offsets = self.spec.offsets()
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            want_dx = need_input or idx > 0
            dW, db, dx = self._bwd(acts[idx], W, acts[idx + 1], g, self._acts[idx], want_dx)
            w0, b0, end = offsets[idx]
            grad[w0:b0] = dW.ravel()
            grad[b0:end] = db
            if want_dx:
                if not np.isfinite(dx).all():
                    raise NumericError(f"non-finite gradient in layer {idx}", layer=idx)
                g = dx
        if not np.isfinite(grad).all():
            raise NumericError("non-finite parameter gradient")
        input_grad = None
        if need_input:
            input_grad = g[0] if single else g
        return grad, input_grad


@lru_cache(maxsize=64)
def _mlp(spec):
    return Mlp(spec)


def mlp_forward(spec, params, x):
    return _mlp(spec).forward(params, x)


def backward(spec, params, x, upstream_grad):
    """Reverse-mode gradients ``(param_grads, input_grad)`` of ``upstream . mlp(x)``."""
    mlp = _mlp(spec)
    _, cache = mlp.forward_train(params, x)
    return mlp.backward(params, cache, upstream_grad)


# --- tanh-squashed diagonal Gaussian -------------------------------------------------


@dataclass
class GaussianHeadOutput:
    mean: np.ndarray
    log_std: np.ndarray
    raw_log_std: np.ndarray = None

    @classmethod
    def from_network(cls, out, action_dim):
        mean = out[..., :action_dim]
        raw = out[..., action_dim:]
        return cls(mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw)

    def log_std_mask(self):
        """1 where the clamp is inactive (gradient passes), 0 where it saturates."""
        raw = self.log_std if self.raw_log_std is None else self.raw_log_std
        return ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)).astype(np.float64)


def gaussian_log_density(x, loc, log_std):
    """Sum over the last axis of the diagonal normal log-density."""
    z = (x - loc) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def squash_correction(action):
    """Sum over the last axis of ``log(1 - a^2 + eps)``."""
    return np.sum(np.log(1.0 - action * action + SQUASH_EPS), axis=-1)


def gaussian_sample(head, noise):
    """Reparameterized tanh-squashed sample: ``(action, log_prob)``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != np.shape(head.mean):
        raise ShapeError(f"noise shape {noise.shape} does not match mean {np.shape(head.mean)}")
    pre = head.mean + np.exp(head.log_std) * noise
    action = np.tanh(pre)
    log_prob = gaussian_log_density(pre, head.mean, head.log_std) - squash_correction(action)
    return action, log_prob


def finite_diff_check(fn, params, eps=1e-6):
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``fn(params)`` must return ``(value, analytic_gradient)`` with a scalar value.
    """
    params = np.array(params, dtype=np.float64)
    _, analytic = fn(params)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    flat = params.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(params)[0]
        flat[i] = orig - eps
        f_minus = fn(params)[0]
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


class Adam:
    """Adaptive moment estimation on one flat parameter vector (updated in place)."""

    def __init__(self, size, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        """In-place update; ``params`` may have any contiguous shape of ``size`` elements."""
        grad = np.asarray(grad, dtype=np.float64).reshape(self.m.shape)
        flat = params.reshape(-1)
        if not np.shares_memory(flat, params):
            raise ValueError("parameters must be contiguous to be updated in place")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def state(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load(self, state):
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.t = int(state["t"])
