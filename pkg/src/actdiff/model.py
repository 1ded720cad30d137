"""Preconditioned MLP denoiser with hand-written reverse mode.

The network sees the scaled noisy chunk, the flattened observation window and
sinusoidal features of the noise level::

    x0_hat = c_skip(sigma) * x + c_out(sigma) * F([c_in(sigma) * x, obs, emb(c_noise(sigma))])
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_rng
from .errors import InvalidConfigError, InvalidInputError, NumericInputError

N_NOISE_FEATURES = 16
_FREQS = np.geomspace(1.0, 64.0, N_NOISE_FEATURES // 2)
ACTIVATIONS = ("silu", "identity")


@dataclass(frozen=True)
class ModelDims:
    l: int
    action_dim: int
    c: int
    obs_dim: int
    hidden: tuple = (256, 256, 256)
    activation: str = "silu"

    def __post_init__(self):
        for key in ("l", "action_dim", "c", "obs_dim"):
            if getattr(self, key) < 1:
                raise InvalidConfigError(f"{key} must be >= 1", key)
        if any(int(w) < 1 for w in self.hidden):
            raise InvalidConfigError(f"hidden widths must be >= 1, got {self.hidden}", "hidden")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}", "activation")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def x_dim(self):
        return self.l * self.action_dim

    @property
    def cond_dim(self):
        return self.c * self.obs_dim

    @property
    def in_dim(self):
        return self.x_dim + self.cond_dim + N_NOISE_FEATURES

    @property
    def layer_sizes(self):
        return (self.in_dim, *self.hidden, self.x_dim)


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    dims: ModelDims
    weights: tuple
    biases: tuple
    sigma_data: float = 0.5

    def __post_init__(self):
        sizes = self.dims.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidInputError("layer count does not match dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise InvalidInputError(f"layer {i} has shape {w.shape}/{b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericInputError(f"layer {i} contains non-finite values")
        if self.sigma_data <= 0:
            raise InvalidConfigError("sigma_data must be positive", "sigma_data")

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec):
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
            biases.append(vec[k:k + b.size].reshape(b.shape))
            k += b.size
        return DenoiserParams(self.dims, tuple(weights), tuple(biases), self.sigma_data)

    def __eq__(self, other):
        if not isinstance(other, DenoiserParams):
            return NotImplemented
        return (self.dims == other.dims and self.sigma_data == other.sigma_data
                and np.array_equal(self.flat(), other.flat()))


def init_params(seed, dims, sigma_data=0.5):
    """Fan-in scaled uniform weights, zero biases."""
    rng = make_rng(seed, 0x1417)
    sizes = dims.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenoiserParams(dims, tuple(weights), tuple(biases), float(sigma_data))


def zero_output_layer(p):
    """Copy of ``p`` whose network branch is identically zero."""
    weights = p.weights[:-1] + (np.zeros_like(p.weights[-1]),)
    biases = p.biases[:-1] + (np.zeros_like(p.biases[-1]),)
    return DenoiserParams(p.dims, weights, biases, p.sigma_data)


def precondition(sigma, sigma_data):
    """Return (c_skip, c_out, c_in, c_noise) for noise level(s) ``sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    s2, d2 = sigma**2, sigma_data**2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def noise_features(c_noise):
    arg = np.asarray(c_noise, dtype=float)[:, None] * _FREQS[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _act(z, kind):
    if kind == "identity":
        return z, None
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _act_grad(z, s, kind):
    if kind == "identity":
        return 1.0
    return s * (1.0 + z * (1.0 - s))


def _as_batch(p, x, sigma, obs):
    x = np.asarray(x, dtype=float)
    obs = np.asarray(obs, dtype=float)
    batched = x.ndim == 3 or (x.ndim == 2 and x.shape[1] == p.dims.x_dim)
    n = x.shape[0] if batched else 1
    x = x.reshape(n, -1)
    obs = obs.reshape(n, -1)
    if x.shape[1] != p.dims.x_dim or obs.shape[1] != p.dims.cond_dim or len(obs) != len(x):
        raise InvalidInputError(
            f"expected x (*, {p.dims.x_dim}) and obs (*, {p.dims.cond_dim}), "
            f"got {x.shape} and {obs.shape}")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(x),))
    if not (np.isfinite(x).all() and np.isfinite(obs).all() and np.isfinite(sigma).all()):
        raise NumericInputError("denoiser inputs contain non-finite values")
    if np.any(sigma <= 0):
        raise InvalidInputError("sigma must be positive")
    return x, sigma, obs


def _forward(p, x, sigma, obs):
    c_skip, c_out, c_in, c_noise = precondition(sigma, p.sigma_data)
    z = np.concatenate([c_in[:, None] * x, obs, noise_features(c_noise)], axis=1)
    acts, pre, gates = [z], [], []
    n = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        u = acts[-1] @ w + b
        if i < n - 1:
            a, s = _act(u, p.dims.activation)
            pre.append(u)
            gates.append(s)
            acts.append(a)
        else:
            acts.append(u)
    out = c_skip[:, None] * x + c_out[:, None] * acts[-1]
    cache = (c_skip, c_out, c_in, acts, pre, gates)
    return out, cache


def denoise(p, x, sigma, obs):
    """Clean-chunk estimate. Accepts a single sample or a leading batch axis."""
    xb, sb, ob = _as_batch(p, x, sigma, obs)
    out, _ = _forward(p, xb, sb, ob)
    if not np.isfinite(out).all():
        raise NumericInputError("denoiser produced non-finite output")
    return out.reshape(np.shape(x))


def denoise_backward(p, x, sigma, obs, upstream):
    """Reverse-mode gradients of ``sum(upstream * denoise(...))``.

    Returns ``(param_grads, dx)`` where ``param_grads`` is a tuple of
    (dW list, db list) summed over the batch.
    """
    xb, sb, ob = _as_batch(p, x, sigma, obs)
    _, cache = _forward(p, xb, sb, ob)
    grads, dx = _backward(p, cache, np.asarray(upstream, dtype=float).reshape(xb.shape))
    return grads, dx.reshape(np.shape(x))


def denoise_with_grad(p, x, sigma, obs, loss_grad):
    """Forward pass plus reverse pass for an upstream computed from the output.

    ``loss_grad(out) -> (loss, d loss / d out)``; returns (loss, param_grads, dx).
    """
    xb, sb, ob = _as_batch(p, x, sigma, obs)
    out, cache = _forward(p, xb, sb, ob)
    loss, g = loss_grad(out)
    grads, dx = _backward(p, cache, g)
    return loss, grads, dx


def _backward(p, cache, g):
    c_skip, c_out, c_in, acts, pre, gates = cache
    n = len(p.weights)
    dw, db = [None] * n, [None] * n
    delta = c_out[:, None] * g
    for i in range(n - 1, -1, -1):
        dw[i] = acts[i].T @ delta
        db[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i].T
        if i > 0:
            delta = delta * _act_grad(pre[i - 1], gates[i - 1], p.dims.activation)
    dx = c_skip[:, None] * g + c_in[:, None] * delta[:, : p.dims.x_dim]
    return (dw, db), dx


def flatten_grads(grads):
    dw, db = grads
    return np.concatenate([a.ravel() for pair in zip(dw, db) for a in pair])
