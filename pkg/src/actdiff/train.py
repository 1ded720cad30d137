"""Denoising score-matching training, normalisation and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import PolicyConfig, make_rng
from .errors import (InvalidConfigError, InvalidInputError, NumericInputError, ParseError,
                     VersionError)
from .model import DenoiserParams, ModelDims, denoise, denoise_with_grad, init_params

CKPT_MAGIC = b"ADCK"
CKPT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 8000
    learning_rate: float = 3e-4
    P_mean: float = -1.2
    P_std: float = 1.2
    sigma_data: float = 0.5
    seed: int = 0
    eval_fraction: float = 0.1
    hidden: tuple = (256, 256, 256)
    eval_every: int = 500
    eval_samples: int = 1024

    def __post_init__(self):
        checks = [
            (self.batch_size >= 1, "batch_size"),
            (self.steps >= 0, "steps"),
            (self.learning_rate > 0, "learning_rate"),
            (self.P_std > 0, "P_std"),
            (self.sigma_data > 0, "sigma_data"),
            (0 < self.eval_fraction < 0.5, "eval_fraction"),
            (self.eval_every >= 1, "eval_every"),
        ]
        for ok, key in checks:
            if not ok:
                raise InvalidConfigError(f"invalid value for {key}: {getattr(self, key)!r}", key)
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine maps; actions land at standard deviation ``sigma_data``."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    sigma_data: float = 0.5

    @classmethod
    def fit(cls, states, actions, sigma_data):
        def stats(a):
            mean = a.mean(axis=0)
            std = a.std(axis=0)
            return mean, np.where(std > 1e-6, std, 1.0)

        om, os_ = stats(np.asarray(states, dtype=float))
        am, as_ = stats(np.asarray(actions, dtype=float))
        return cls(om, os_, am, as_, float(sigma_data))

    def obs(self, o):
        return (np.asarray(o, dtype=float) - self.obs_mean) / self.obs_std

    def act(self, a):
        return (np.asarray(a, dtype=float) - self.act_mean) / self.act_std * self.sigma_data

    def unact(self, a):
        return np.asarray(a, dtype=float) / self.sigma_data * self.act_std + self.act_mean

    def to_json(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("obs_mean", "obs_std", "act_mean", "act_std")),
                   float(d["sigma_data"]))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: DenoiserParams
    norm: Normalizer
    policy: PolicyConfig
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.params == other.params and self.policy == other.policy
                and json.dumps(self.norm.to_json()) == json.dumps(other.norm.to_json())
                and self.meta == other.meta)


def sample_sigma(cfg, rng, size=None):
    """Log-normal noise levels, ``exp(P_mean + P_std * z)``."""
    return np.exp(cfg.P_mean + cfg.P_std * rng.standard_normal(size))


def loss_weight(sigma, sigma_data):
    sigma = np.asarray(sigma, dtype=float)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def obs_window(states, t, c):
    """Rows t-c+1..t of ``states``, repeating row 0 before the start."""
    idx = np.clip(np.arange(t - c + 1, t + 1), 0, None)
    return np.asarray(states)[idx]


def chunk_targets(traj, predict_states=False):
    """Per-timestep diffusion targets: the action, optionally followed by the state it leads to."""
    actions = np.asarray(traj.actions, float)
    if not predict_states:
        return actions
    states = np.asarray(traj.states, float)
    nxt = states[np.minimum(np.arange(1, len(states) + 1), len(states) - 1)]
    return np.concatenate([actions, nxt], axis=1)


def chunk_trajectory(traj, c, l, predict_states=False):
    """One (obs window, target chunk) pair per timestep, with edge padding."""
    T = len(traj)
    t = np.arange(T)
    obs_idx = np.clip(t[:, None] + np.arange(-c + 1, 1)[None, :], 0, T - 1)
    act_idx = np.clip(t[:, None] + np.arange(l)[None, :], 0, T - 1)
    return np.asarray(traj.states, float)[obs_idx], chunk_targets(traj, predict_states)[act_idx]


def chunk_dataset(trajectories, c, l, predict_states=False):
    pairs = [chunk_trajectory(tr, c, l, predict_states) for tr in trajectories]
    if not pairs:
        raise InvalidConfigError("dataset yields no (observation, chunk) pairs", "dataset")
    return np.concatenate([o for o, _ in pairs]), np.concatenate([a for _, a in pairs])


def denoising_loss(p, y, obs, rng, cfg, sigma=None, noise=None, denoiser=None):
    """Weighted denoising loss averaged over the batch, with exact parameter gradients.

    Per sample: ``lambda(sigma) * mean((D(y + n; sigma) - y)**2)`` where the mean
    runs over chunk entries. ``sigma``/``noise`` may be fixed by the caller;
    ``denoiser`` swaps in an arbitrary callable, in which case no gradients
    are returned. Returns ``(loss, grads)``.
    """
    y = np.asarray(y, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if y.ndim != 2 or len(y) == 0:
        raise InvalidInputError("batch must be a non-empty (B, x_dim) array")
    if not (np.isfinite(y).all() and np.isfinite(obs).all()):
        raise NumericInputError("batch contains non-finite values")
    B, d = y.shape
    if sigma is None:
        sigma = sample_sigma(cfg, rng, B)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (B,))
    if noise is None:
        noise = rng.standard_normal(y.shape)
    x = y + sigma[:, None] * noise
    lam = loss_weight(sigma, p.sigma_data if p is not None else cfg.sigma_data)

    if denoiser is not None:
        err = np.asarray(denoiser(x, sigma, obs), dtype=float) - y
        return float(np.mean(lam * np.mean(err**2, axis=1))), None

    def loss_grad(out):
        err = out - y
        loss = float(np.mean(lam * np.mean(err**2, axis=1)))
        return loss, (2.0 / (B * d)) * lam[:, None] * err

    loss, grads, _ = denoise_with_grad(p, x, sigma, obs, loss_grad)
    return loss, grads


class Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def _round32(p):
    return DenoiserParams(p.dims, tuple(w.astype(np.float32).astype(float) for w in p.weights),
                          tuple(b.astype(np.float32).astype(float) for b in p.biases), p.sigma_data)


def split_trajectories(trajectories, eval_fraction, rng):
    n = len(trajectories)
    if n < 2:
        return list(trajectories), list(trajectories)
    n_eval = min(max(1, int(round(eval_fraction * n))), n - 1)
    perm = rng.permutation(n)
    ev = set(perm[:n_eval].tolist())
    return ([t for i, t in enumerate(trajectories) if i not in ev],
            [t for i, t in enumerate(trajectories) if i in ev])


def train_arrays(obs, chunks, policy, cfg, norm, meta=None, progress=None):
    """Fit a denoiser to pre-chunked, un-normalised arrays.

    ``obs`` is (N, c, obs_dim) and ``chunks`` (N, l, policy.channels); the first
    ``eval_idx`` rows (given through ``meta['n_eval']``) are treated as held out.
    """
    meta = dict(meta or {})
    n_eval = int(meta.pop("n_eval", 0))
    x_all = norm.act(chunks).reshape(len(chunks), -1)
    o_all = norm.obs(obs).reshape(len(obs), -1)
    x_ev, o_ev = x_all[:n_eval], o_all[:n_eval]
    x_tr, o_tr = x_all[n_eval:], o_all[n_eval:]
    if len(x_tr) == 0:
        raise InvalidConfigError("no training pairs", "dataset")
    if len(x_ev) == 0:
        x_ev, o_ev = x_tr, o_tr

    dims = ModelDims(policy.l, policy.channels, policy.c, policy.obs_dim, cfg.hidden)
    params = _round32(init_params(cfg.seed, dims, cfg.sigma_data))
    rng = make_rng(cfg.seed, 1)
    eval_rng = make_rng(cfg.seed, 2)
    k = min(cfg.eval_samples, len(x_ev))
    ev_idx = eval_rng.choice(len(x_ev), size=k, replace=False)
    ev_sigma = sample_sigma(cfg, eval_rng, k)
    ev_noise = eval_rng.standard_normal((k, x_ev.shape[1]))

    def eval_loss(p):
        loss, _ = denoising_loss(p, x_ev[ev_idx], o_ev[ev_idx], None, cfg, ev_sigma, ev_noise,
                                 denoiser=lambda x, s, o: denoise(p, x, s, o))
        return loss

    flat_shapes = [a.shape for pair in zip(params.weights, params.biases) for a in pair]
    opt = Adam(flat_shapes, cfg.learning_rate)
    train_curve, eval_curve = [], [(0, eval_loss(params))]
    tensors = [a for pair in zip(params.weights, params.biases) for a in pair]
    for step in range(cfg.steps):
        idx = rng.integers(0, len(x_tr), cfg.batch_size)
        loss, (dw, db) = denoising_loss(params, x_tr[idx], o_tr[idx], rng, cfg)
        if not np.isfinite(loss):
            raise NumericInputError(f"training loss became non-finite at step {step}")
        grads = [a for pair in zip(dw, db) for a in pair]
        tensors = opt.step(tensors, grads)
        params = DenoiserParams(dims, tuple(tensors[0::2]), tuple(tensors[1::2]), cfg.sigma_data)
        train_curve.append(loss)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            eval_curve.append((step + 1, eval_loss(params)))
            if progress is not None:
                progress(step + 1, loss, eval_curve[-1][1])
    params = _round32(params)
    meta.update({
        "train_config": _jsonable(asdict(cfg)),
        "train_loss": [float(np.float32(v)) for v in train_curve],
        "eval_loss": [[int(s), float(np.float32(v))] for s, v in eval_curve],
    })
    return Checkpoint(params, norm, policy, _jsonable(meta))


def train(dataset, policy, cfg, progress=None):
    if dataset.obs_dim != policy.obs_dim or dataset.action_dim != policy.action_dim:
        raise InvalidConfigError(
            f"dataset dims ({dataset.obs_dim}, {dataset.action_dim}) do not match policy "
            f"({policy.obs_dim}, {policy.action_dim})", "policy")
    train_tr, eval_tr = split_trajectories(dataset.trajectories, cfg.eval_fraction,
                                           make_rng(cfg.seed, 3))
    ps = policy.predict_states
    o_tr, a_tr = chunk_dataset(train_tr, policy.c, policy.l, ps)
    if eval_tr is train_tr or len(dataset) < 2:
        o_ev, a_ev = o_tr[:0], a_tr[:0]
    else:
        o_ev, a_ev = chunk_dataset(eval_tr, policy.c, policy.l, ps)
    states = np.concatenate([np.asarray(t.states, float) for t in train_tr])
    actions = np.concatenate([chunk_targets(t, ps) for t in train_tr])
    norm = Normalizer.fit(states, actions, cfg.sigma_data)
    meta = {"n_eval": len(o_ev), "dataset_meta": dataset.meta}
    return train_arrays(np.concatenate([o_ev, o_tr]), np.concatenate([a_ev, a_tr]),
                        policy, cfg, norm, meta, progress)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(ck, path):
    p = ck.params
    header = {
        "version": CKPT_VERSION,
        "dims": _jsonable(asdict(p.dims)),
        "sigma_data": p.sigma_data,
        "policy": asdict(ck.policy),
        "norm": ck.norm.to_json(),
        "layers": [[list(w.shape), list(b.shape)] for w, b in zip(p.weights, p.biases)],
        "meta": _jsonable(ck.meta),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for w, b in zip(p.weights, p.biases):
            f.write(w.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise ParseError("checkpoint shorter than preamble", len(raw))
    magic, version, hlen = _PREAMBLE.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported")
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header is not valid JSON: {exc}", start) from None
    offset = start + hlen
    weights, biases = [], []
    for wshape, bshape in header["layers"]:
        arrays = []
        for shape in (wshape, bshape):
            n = int(np.prod(shape))
            if offset + 4 * n > len(raw):
                raise ParseError("checkpoint payload truncated", len(raw))
            arrays.append(np.frombuffer(raw, "<f4", n, offset).reshape(shape).astype(float))
            offset += 4 * n
        weights.append(arrays[0])
        biases.append(arrays[1])
    if offset != len(raw):
        raise ParseError("trailing bytes after checkpoint payload", offset)
    d = header["dims"]
    dims = ModelDims(d["l"], d["action_dim"], d["c"], d["obs_dim"], tuple(d["hidden"]), d["activation"])
    params = DenoiserParams(dims, tuple(weights), tuple(biases), float(header["sigma_data"]))
    return Checkpoint(params, Normalizer.from_json(header["norm"]), PolicyConfig(**header["policy"]),
                      header["meta"])
