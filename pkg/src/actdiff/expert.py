"""Scripted experts and demonstration datasets with graded variance."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import env as envlib
from .core import Dataset, Trajectory, make_rng
from .errors import GenerationError, InvalidConfigError

MAX_ATTEMPTS = 50
GAIN = 4.0
SWITCH_RADIUS = 0.06
# Maze demos first climb straight up by this multiple of the waypoint spread, so
# noisier presets commit to a side later and leave a longer ambiguous stretch.
LAUNCH_RISE = 2.0
LAUNCH_TOL = 0.02

MAZE_WAYPOINTS_LEFT = ((0.15, 0.33), (0.15, 0.67))
PUSH_CIRCLE_RADIUS = 0.13


@dataclass(frozen=True)
class VariancePreset:
    name: str
    start_jitter: float
    waypoint_offset_scale: float
    goal_offset_var: float
    mode_mix: float = 0.5

    def __post_init__(self):
        for key in ("start_jitter", "waypoint_offset_scale", "goal_offset_var"):
            if getattr(self, key) < 0:
                raise InvalidConfigError(f"{key} must be >= 0", key)
        if not 0.0 <= self.mode_mix <= 1.0:
            raise InvalidConfigError("mode_mix must lie in [0, 1]", "mode_mix")


def _scaled(name, k, mode_mix=0.5):
    return VariancePreset(name, 0.02 * k, 0.03 * k, 0.02 * k, mode_mix)


PRESETS = {"low": _scaled("low", 1), "medium": _scaled("medium", 2), "high": _scaled("high", 3)}


def get_preset(name, mode_mix=None):
    try:
        preset = PRESETS[name]
    except KeyError:
        raise InvalidConfigError(f"unknown preset {name!r}", "preset") from None
    return preset if mode_mix is None else replace(preset, mode_mix=mode_mix)


@dataclass(frozen=True)
class LatentMode:
    """Maze: ``-1`` passes left of the block, ``+1`` right.  Push: circling direction."""

    mode: int


class MazeExpert:
    def __init__(self, mode, preset, rng):
        self.mode = mode
        offsets = preset.waypoint_offset_scale * rng.standard_normal((2, 2))
        self.waypoints = []
        for (x, y), off in zip(MAZE_WAYPOINTS_LEFT, offsets):
            if mode.mode > 0:
                x = 1.0 - x
            self.waypoints.append(np.array([x, y]) + off)
        self.k = 0
        self.rise = LAUNCH_RISE * preset.waypoint_offset_scale
        self.launch = None

    def act(self, s, cfg):
        if self.launch is None:
            self.launch = s.agent_pos + np.array([0.0, self.rise])
        if self.launch is not False:
            if np.hypot(*(self.launch - s.agent_pos)) >= LAUNCH_TOL:
                return _p_control(self.launch - s.agent_pos, cfg)
            self.launch = False
        target = self.waypoints[self.k] if self.k < len(self.waypoints) else s.goal_pos
        if self.k < len(self.waypoints) and np.hypot(*(target - s.agent_pos)) < SWITCH_RADIUS:
            self.k += 1
            target = self.waypoints[self.k] if self.k < len(self.waypoints) else s.goal_pos
        return _p_control(target - s.agent_pos, cfg)


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


class PushExpert:
    """Circle the disk in the latent direction until behind it, then push toward the goal."""

    def __init__(self, mode, preset, rng):
        self.mode = mode
        self.radius = max(PUSH_CIRCLE_RADIUS + preset.waypoint_offset_scale * rng.standard_normal(),
                          envlib.OBJECT_RADIUS + envlib.AGENT_RADIUS + 0.03)
        self.lead = 0.7 + preset.waypoint_offset_scale * rng.standard_normal()

    def act(self, s, cfg):
        reach = envlib.OBJECT_RADIUS + envlib.AGENT_RADIUS
        u = s.goal_pos - s.object_pos
        u = u / max(np.hypot(*u), 1e-9)
        rel = s.agent_pos - s.object_pos
        phi_agent = np.arctan2(rel[1], rel[0])
        err = _wrap(np.arctan2(-u[1], -u[0]) - phi_agent)
        if abs(err) > 0.5:
            turn = self.mode.mode if abs(err) > 1.2 else np.sign(err)
            ang = phi_agent + turn * self.lead
            target = s.object_pos + self.radius * np.array([np.cos(ang), np.sin(ang)])
        else:
            staging = s.object_pos - u * (reach + 0.02)
            if np.hypot(*(staging - s.agent_pos)) > 0.03 and abs(err) > 0.15:
                target = staging
            else:
                target = s.object_pos + 0.2 * u
        return _p_control(target - s.agent_pos, cfg)


def _p_control(delta, cfg):
    a = GAIN * np.asarray(delta, dtype=float)
    speed = np.hypot(*a)
    return a if speed <= cfg.a_max else a * (cfg.a_max / speed)


def demo_env_config(cfg, preset):
    return replace(cfg, start_jitter=preset.start_jitter, goal_jitter=preset.goal_offset_var,
                   obs_noise_sigma=0.0)


def sample_mode(preset, rng):
    return LatentMode(-1 if rng.uniform() < preset.mode_mix else 1)


def make_expert(cfg, mode, preset, rng):
    cls = MazeExpert if cfg.env_id == "maze" else PushExpert
    return cls(mode, preset, rng)


def run_expert(cfg, preset, rng, mode=None):
    """One expert rollout; returns (trajectory arrays, final state, mode)."""
    mode = sample_mode(preset, rng) if mode is None else mode
    dcfg = demo_env_config(cfg, preset)
    s = envlib.env_reset(dcfg, rng)
    expert = make_expert(dcfg, mode, preset, rng)
    states, actions = [], []
    while s.step_index < dcfg.max_steps and not envlib.is_success(s, dcfg):
        if s.collided:
            break
        obs = envlib.observe(s, dcfg)
        a = expert.act(s, dcfg)
        states.append(obs)
        actions.append(a)
        s, _ = envlib.env_step(s, a, dcfg, rng)
    return np.array(states), np.array(actions), s, mode


def generate_demo(cfg, preset, rng, return_mode=False):
    mode = sample_mode(preset, rng)
    dcfg = demo_env_config(cfg, preset)
    for _ in range(MAX_ATTEMPTS):
        states, actions, final, _ = run_expert(cfg, preset, rng, mode)
        if len(states) and envlib.is_success(final, dcfg):
            traj = Trajectory(states, actions)
            return (traj, mode) if return_mode else traj
    raise GenerationError(
        f"expert failed {MAX_ATTEMPTS} times on {cfg.env_id} with preset {preset.name!r}")


def path_side(traj):
    """Signed-area side of a maze path relative to the straight start-goal line.

    Negative for paths passing left of the block, positive for right.
    """
    p = np.asarray(traj.states if isinstance(traj, Trajectory) else traj, dtype=float)[:, :2]
    start, goal = p[0], p[-1]
    d = goal - start
    rel = p - start
    # cross(d, rel) > 0 means left of the start->goal direction
    cross = d[0] * rel[:, 1] - d[1] * rel[:, 0]
    seg = np.hypot(*np.diff(p, axis=0).T)
    area = float(np.sum(0.5 * (cross[1:] + cross[:-1]) * seg))
    return -1 if area > 0 else 1


def build_dataset(n, cfg, preset, seed):
    if n < 1:
        raise InvalidConfigError(f"n must be >= 1, got {n}", "n")
    trajs, modes = [], []
    for i in range(n):
        traj, mode = generate_demo(cfg, preset, make_rng(seed, i), return_mode=True)
        trajs.append(traj)
        modes.append(mode.mode)
    meta = {
        "env_id": cfg.env_id,
        "preset": asdict(preset),
        "seed": int(seed),
        "n": int(n),
        "modes": modes,
        "env": asdict(cfg),
    }
    return Dataset(tuple(trajs), json.loads(json.dumps(meta)))


def trajectory_variance(trajs, n_points=50):
    """Mean per-timestep positional variance across demos, on a normalised time axis.

    Each path is linearly resampled to ``n_points`` so demos of unequal length line up.
    """
    u = np.linspace(0.0, 1.0, n_points)
    paths = []
    for t in trajs:
        p = np.asarray(t.states if isinstance(t, Trajectory) else t, dtype=float)[:, :2]
        src = np.linspace(0.0, 1.0, len(p)) if len(p) > 1 else np.zeros(1)
        paths.append(np.stack([np.interp(u, src, p[:, k]) for k in range(2)], axis=1))
    return float(np.mean(np.var(np.stack(paths), axis=0)))
