"""Domain types, overlap arithmetic, dataset files and the seeded RNG contract."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, ParseError, VersionError

DATASET_MAGIC = b"ADDS"
DATASET_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")  # magic, version, header byte length


def make_rng(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    ``make_rng(7, 3)`` and ``make_rng(7, 4)`` are statistically independent
    streams; the same arguments always reproduce the same draws.
    """
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PolicyConfig:
    c: int = 1
    l: int = 16
    h: int = 1
    action_dim: int = 2
    obs_dim: int = 4
    predict_states: bool = False

    def __post_init__(self):
        if self.c < 1:
            raise InvalidConfigError(f"c must be >= 1, got {self.c}", "c")
        if not 1 <= self.h <= self.l:
            raise InvalidConfigError(f"need 1 <= h <= l, got h={self.h}, l={self.l}", "h")
        if self.action_dim < 1:
            raise InvalidConfigError("action_dim must be >= 1", "action_dim")
        if self.obs_dim < 1:
            raise InvalidConfigError("obs_dim must be >= 1", "obs_dim")

    @property
    def channels(self):
        """Per-timestep width of a diffused chunk: actions, then predicted next states if enabled."""
        return self.action_dim + (self.obs_dim if self.predict_states else 0)

    def with_h(self, h):
        return replace(self, h=h)


def _frozen_array(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Paired state/action sequences, stored as float32 so files round-trip exactly."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = _frozen_array(self.states, np.float32)
        actions = _frozen_array(self.actions, np.float32)
        if states.ndim != 2 or actions.ndim != 2:
            raise InvalidInputError("states and actions must be 2-D arrays")
        if len(states) != len(actions) or len(states) < 1:
            raise InvalidInputError(
                f"states/actions length mismatch or empty: {len(states)} vs {len(actions)}")
        if not (np.isfinite(states).all() and np.isfinite(actions).all()):
            raise InvalidInputError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.states.shape == other.states.shape
                and self.actions.shape == other.actions.shape
                and self.states.tobytes() == other.states.tobytes()
                and self.actions.tobytes() == other.actions.tobytes())


@dataclass(frozen=True, eq=False)
class ActionChunk:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim != 2:
            raise InvalidInputError("action chunk must be l x action_dim")
        if not np.isfinite(values).all():
            raise InvalidInputError("action chunk contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def l(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ActionChunk):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class PriorChunk:
    chunk: ActionChunk
    birth_time: int

    def __post_init__(self):
        if self.birth_time < 0:
            raise InvalidInputError("birth_time must be >= 0")


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise InvalidInputError("dataset must contain at least one trajectory")
        obs_dim = trajs[0].states.shape[1]
        action_dim = trajs[0].actions.shape[1]
        for i, tr in enumerate(trajs):
            if tr.states.shape[1] != obs_dim or tr.actions.shape[1] != action_dim:
                raise InvalidInputError(f"trajectory {i} has inconsistent dims")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def obs_dim(self):
        return self.trajectories[0].states.shape[1]

    @property
    def action_dim(self):
        return self.trajectories[0].actions.shape[1]

    def __len__(self):
        return len(self.trajectories)


def overlap_weights(l, h, decay=0.5):
    """Weights ``decay**k`` for the ``l - h`` timesteps shared by consecutive chunks."""
    if not 1 <= h <= l:
        raise InvalidConfigError(f"need 1 <= h <= l, got h={h}, l={l}", "h")
    if not 0.0 < decay <= 1.0:
        raise InvalidConfigError(f"decay must lie in (0, 1], got {decay}", "decay")
    return decay ** np.arange(l - h, dtype=np.float64)


def extract_overlap(prior, current, h):
    """Return (prior rows h..l-1, current rows 0..l-h-1): the same absolute timesteps."""
    p = prior.chunk.values if isinstance(prior, PriorChunk) else np.asarray(prior)
    c = current.values if isinstance(current, ActionChunk) else np.asarray(current)
    if p.shape != c.shape or p.ndim != 2:
        raise InvalidInputError(f"prior {p.shape} and current {c.shape} chunks differ in shape")
    l = p.shape[0]
    if not 1 <= h <= l:
        raise InvalidConfigError(f"need 1 <= h <= l, got h={h}, l={l}", "h")
    return p[h:], c[: l - h]


def dataset_write(d, path):
    path = Path(path)
    header = {
        "version": DATASET_VERSION,
        "obs_dim": d.obs_dim,
        "action_dim": d.action_dim,
        "trajectories": [
            {"length": len(t), "obs_dim": t.states.shape[1], "action_dim": t.actions.shape[1]}
            for t in d.trajectories
        ],
        "meta": d.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(DATASET_MAGIC, DATASET_VERSION, len(blob)))
        f.write(blob)
        for t in d.trajectories:
            f.write(t.states.astype("<f4").tobytes())
            f.write(t.actions.astype("<f4").tobytes())
    return True


def dataset_read(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise ParseError("file shorter than preamble", len(raw))
    magic, version, hlen = _PREAMBLE.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise VersionError(f"dataset version {version} unsupported (expected {DATASET_VERSION})")
    start = _PREAMBLE.size
    if len(raw) < start + hlen:
        raise ParseError("header truncated", len(raw))
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise ParseError(f"header is not valid JSON: {exc}", start + pos) from None
    if header.get("version") != DATASET_VERSION:
        raise VersionError(f"header version {header.get('version')} unsupported")

    obs_dim, action_dim = header["obs_dim"], header["action_dim"]
    offset = start + hlen
    trajs = []
    for i, rec in enumerate(header["trajectories"]):
        if rec["obs_dim"] != obs_dim or rec["action_dim"] != action_dim:
            raise InvalidInputError(
                f"trajectory {i} declares dims ({rec['obs_dim']}, {rec['action_dim']}) "
                f"but dataset declares ({obs_dim}, {action_dim})")
        n_s = rec["length"] * obs_dim * 4
        n_a = rec["length"] * action_dim * 4
        if offset + n_s + n_a > len(raw):
            raise ParseError(f"payload truncated in trajectory {i}", len(raw))
        states = np.frombuffer(raw, "<f4", rec["length"] * obs_dim, offset)
        actions = np.frombuffer(raw, "<f4", rec["length"] * action_dim, offset + n_s)
        offset += n_s + n_a
        trajs.append(Trajectory(states.reshape(-1, obs_dim), actions.reshape(-1, action_dim)))
    if offset != len(raw):
        raise ParseError("trailing bytes after payload", offset)
    return Dataset(tuple(trajs), header["meta"])
