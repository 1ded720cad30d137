"""Probability-flow ODE sampling, prior-deviation guidance and chunk selection strategies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ActionChunk, PriorChunk, extract_overlap, overlap_weights
from .errors import (DivergenceError, EmptyOverlapError, InvalidConfigError, InvalidInputError,
                     InvalidStateError)
from .model import denoise

STRATEGIES = ("random", "coherence", "ensemble", "selfgad")
# Iterates beyond this magnitude (normalised units) count as diverged.
DIVERGENCE_LIMIT = 1e8


@dataclass(frozen=True, eq=False)
class SigmaSchedule:
    sigma_max: float
    sigma_min: float
    n_steps: int
    rho: float
    grid: np.ndarray

    def __len__(self):
        return self.n_steps


def build_schedule(sigma_max=10.0, sigma_min=0.002, n_steps=18, rho=7.0):
    """Karras-style warped grid of ``n_steps`` noise levels followed by a terminal 0."""
    if not (sigma_max > sigma_min > 0):
        raise InvalidConfigError(
            f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}", "sigma_max")
    if n_steps < 2:
        raise InvalidConfigError(f"n_steps must be >= 2, got {n_steps}", "n_steps")
    if rho <= 0:
        raise InvalidConfigError("rho must be positive", "rho")
    i = np.arange(n_steps)
    hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    sig = (hi + i / (n_steps - 1) * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    grid = np.append(sig, 0.0)
    grid.setflags(write=False)
    return SigmaSchedule(float(sigma_max), float(sigma_min), int(n_steps), float(rho), grid)


@dataclass(frozen=True)
class GuidanceConfig:
    beta: float = 0.0
    decay: float = 0.5
    sign: str = "descent"
    apply_every_step: bool = True
    last_k: int = 0
    grad_target: str = "noisy_iterate"

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidConfigError(f"beta must be >= 0, got {self.beta}", "beta")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidConfigError(f"decay must lie in (0, 1], got {self.decay}", "decay")
        if self.sign != "descent":
            raise InvalidConfigError(f"only descent guidance is supported, got {self.sign!r}", "sign")
        if self.grad_target not in ("noisy_iterate", "denoised"):
            raise InvalidConfigError(f"unknown grad_target {self.grad_target!r}", "grad_target")
        if not self.apply_every_step and self.last_k < 1:
            raise InvalidConfigError("last_k must be >= 1 when apply_every_step is false", "last_k")

    def active(self, step, n_steps):
        """Whether guidance follows Euler step ``step`` (0-based) of ``n_steps``."""
        return self.apply_every_step or step >= n_steps - self.last_k


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "random"
    n_samples: int = 1
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    ensemble_decay: float = 0.5
    coherence_decay: float = 0.5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InvalidConfigError(f"unknown strategy {self.kind!r}", "strategy")
        if self.n_samples < 1:
            raise InvalidConfigError("n_samples must be >= 1", "n_samples")
        if not 0.0 < self.ensemble_decay <= 1.0:
            raise InvalidConfigError("ensemble_decay must lie in (0, 1]", "ensemble_decay")


def score(p, x, sigma, obs):
    """Score of the smoothed density, ``(D(x; sigma) - x) / sigma**2``."""
    sigma_arr = np.asarray(sigma, dtype=float)
    if np.any(sigma_arr <= 0):
        raise InvalidInputError("score needs sigma > 0")
    x = np.asarray(x, dtype=float)
    d = denoise(p, x, sigma, obs)
    s = sigma_arr.reshape(sigma_arr.shape + (1,) * (x.ndim - sigma_arr.ndim)) if sigma_arr.ndim else sigma_arr
    return (d - x) / s**2


def _values(chunk):
    if isinstance(chunk, PriorChunk):
        return chunk.chunk.values
    if isinstance(chunk, ActionChunk):
        return chunk.values
    return np.asarray(chunk, dtype=float)


def guidance_loss(current, prior, h, decay=0.5):
    """Decayed squared deviation of ``current`` from ``prior`` over their overlap."""
    p_ov, c_ov = extract_overlap(_values(prior), _values(current), h)
    if len(c_ov) == 0:
        raise EmptyOverlapError("h == l leaves no overlap to guide on")
    w = overlap_weights(len(c_ov) + h, h, decay)
    return float(np.sum(w * np.sum((c_ov - p_ov) ** 2, axis=1)))


def guidance_grad(current, prior, h, decay=0.5):
    """Gradient of :func:`guidance_loss` with respect to ``current`` (l x action_dim)."""
    cur = _values(current)
    p_ov, c_ov = extract_overlap(_values(prior), cur, h)
    if len(c_ov) == 0:
        raise EmptyOverlapError("h == l leaves no overlap to guide on")
    w = overlap_weights(cur.shape[0], h, decay)
    g = np.zeros_like(cur, dtype=float)
    g[: len(c_ov)] = 2.0 * w[:, None] * (c_ov - p_ov)
    return g


def _batch_grad(cur, prior, h, w):
    """Vectorised guidance gradient for (B, l, a) stacks."""
    l = cur.shape[1]
    g = np.zeros_like(cur)
    g[:, : l - h] = 2.0 * w[None, :, None] * (cur[:, : l - h] - prior[:, h:])
    return g


def apply_guidance(x, prior, cfg, h, sigma, step_size):
    """One descent step on the prior-deviation loss, scaled by ``beta * |step_size|``.

    ``x`` is the (l x action_dim) iterate in the same space as ``prior``.
    ``sigma`` is accepted for schedule-aware variants and unused here.
    """
    x = np.asarray(x, dtype=float)
    pv = _values(prior)
    l = pv.shape[0]
    if cfg.beta == 0 or h >= l:
        return x
    g = guidance_grad(x.reshape(pv.shape), pv, h, cfg.decay)
    return x - cfg.beta * abs(step_size) * g.reshape(x.shape)


def sample_batch(p, obs, x, schedule, guidance=None, priors=None, guide_mask=None, h=1):
    """Euler integration of the probability-flow ODE for a stack of iterates.

    ``x`` is (B, l, a) initial noise already scaled by ``sigma_max``; ``obs``
    is (B, c*obs_dim). Guidance (normalised space) is applied to rows where
    ``guide_mask`` is true. Returns ``(samples, diverged_step)`` where
    ``diverged_step[b]`` is -1 or the step index at which row ``b`` blew up.
    """
    x = np.array(x, dtype=float)
    B, l, a = x.shape
    obs = np.asarray(obs, dtype=float).reshape(B, -1)
    diverged = np.full(B, -1)
    guided = (guidance is not None and guidance.beta > 0 and priors is not None and h < l)
    if guided:
        mask = np.ones(B, bool) if guide_mask is None else np.asarray(guide_mask, bool)
        guided = bool(mask.any())
        w = overlap_weights(l, h, guidance.decay)
        pr = np.asarray(priors, dtype=float)
    grid = schedule.grid
    n = len(grid) - 1
    live = np.ones(B, bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            s_cur, s_next = grid[i], grid[i + 1]
            rows = np.flatnonzero(live)
            if len(rows) == 0:
                break
            xr = x[rows]
            d = denoise(p, xr.reshape(len(rows), -1), s_cur, obs[rows]).reshape(xr.shape)
            xr = xr + (s_next - s_cur) * (xr - d) / s_cur
            if guided and guidance.active(i, n):
                gm = mask[rows]
                target = d if guidance.grad_target == "denoised" else xr
                g = _batch_grad(target[gm], pr[rows[gm]], h, w)
                xr[gm] = xr[gm] - guidance.beta * abs(s_next - s_cur) * g
            bad = ~(np.abs(xr) <= DIVERGENCE_LIMIT).all(axis=(1, 2))
            if bad.any():
                diverged[rows[bad]] = i
                live[rows[bad]] = False
                xr[bad] = 0.0
            x[rows] = xr
    return x, diverged


def ode_sample(p, obs, schedule, rng, guidance=None, norm=None, h=None):
    """Draw one action chunk.

    ``guidance`` is an optional ``(GuidanceConfig, PriorChunk)`` pair. With a
    ``norm`` the prior is mapped into the model's normalised action space and
    the result mapped back; without one both are used as-is.
    """
    dims = p.dims
    x0 = schedule.sigma_max * rng.standard_normal((1, dims.l, dims.action_dim))
    obs = np.asarray(obs, dtype=float).reshape(1, -1)
    if norm is not None:
        obs = norm.obs(obs.reshape(dims.c, dims.obs_dim)).reshape(1, -1)
    cfg = prior_arr = None
    step_h = 1 if h is None else h
    if guidance is not None:
        cfg, prior = guidance
        prior_arr = _values(prior)
        if norm is not None:
            prior_arr = norm.act(prior_arr)
        prior_arr = prior_arr[None]
    x, div = sample_batch(p, obs, x0, schedule, cfg, prior_arr, None, step_h)
    if div[0] >= 0:
        raise DivergenceError(int(div[0]))
    out = x[0] if norm is None else norm.unact(x[0])
    return ActionChunk(out)


def select_random(candidates, rng):
    if len(candidates) == 0:
        raise InvalidInputError("no candidates to select from")
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def coherence_losses(candidates, prior, h, decay=0.5):
    return [guidance_loss(c, prior, h, decay) for c in candidates]


def select_coherent(candidates, prior, h, decay=0.5, rng=None):
    """Candidate with the smallest prior-deviation loss; the lowest index wins ties.

    With no overlap (``h == l``) the criterion is undefined and this falls back
    to :func:`select_random` (or the first candidate when ``rng`` is None, which
    is equally a random draw for exchangeable samples).
    """
    if len(candidates) == 0:
        raise InvalidInputError("no candidates to select from")
    if _values(prior).shape[0] <= h:
        return candidates[0] if rng is None else select_random(candidates, rng)
    losses = coherence_losses(candidates, prior, h, decay)
    return candidates[int(np.argmin(losses))]


def temporal_ensemble(buffer, t, ensemble_decay=0.5):
    """Weighted mean of every buffered prediction for absolute step ``t``.

    ``buffer`` holds ``(birth_time, chunk)`` pairs; a chunk born at ``b``
    predicts steps ``b .. b + l - 1`` and gets weight ``ensemble_decay**(t - b)``.
    """
    num, den = 0.0, 0.0
    for birth, chunk in buffer:
        vals = _values(chunk)
        k = t - birth
        if 0 <= k < vals.shape[0]:
            w = ensemble_decay ** k
            num = num + w * vals[k]
            den += w
    if den == 0.0:
        raise InvalidStateError(f"no buffered chunk covers timestep {t}")
    return np.asarray(num / den, dtype=float)
