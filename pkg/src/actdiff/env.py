"""Two small 2-D closed-loop tasks: a two-way maze and a push task with a drifting goal.

Both arenas are the unit square. Actions are velocity commands in world
units per second, clipped to ``a_max`` and integrated with step ``dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError

ENV_IDS = ("maze", "push")

# Maze: agent starts below a wall-like block and must pass it on either side.
MAZE_START = (0.5, 0.1)
MAZE_GOAL = (0.5, 0.9)
MAZE_OBSTACLE = ((0.3, 0.4), (0.7, 0.6))  # (lower-left, upper-right)

# Push: the goal lies on a ring around the disk and the agent starts between
# the two, so it has to circle the disk (either way round) before pushing.
PUSH_OBJECT = (0.5, 0.5)
PUSH_GOAL_RING = 0.3
PUSH_START_RING = 0.14
OBJECT_RADIUS = 0.05
AGENT_RADIUS = 0.02


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "maze"
    bounds: tuple = ((0.0, 0.0), (1.0, 1.0))
    dt: float = 0.1
    goal_speed: float = 0.0
    goal_radius: float = 0.05
    max_steps: int = 120
    obs_noise_sigma: float = 0.0
    a_max: float = 0.4
    start_jitter: float = 0.02
    goal_jitter: float = 0.02
    goal_margin: float = 0.15

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise InvalidConfigError(f"unknown env_id {self.env_id!r}", "env_id")
        (x0, y0), (x1, y1) = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise InvalidConfigError("bounds must have positive extent", "bounds")
        checks = [
            (self.dt > 0, "dt"),
            (self.goal_speed >= 0, "goal_speed"),
            (self.goal_radius > 0, "goal_radius"),
            (self.max_steps >= 1, "max_steps"),
            (self.obs_noise_sigma >= 0, "obs_noise_sigma"),
            (self.a_max > 0, "a_max"),
            (self.start_jitter >= 0, "start_jitter"),
            (self.goal_jitter >= 0, "goal_jitter"),
            (0 <= self.goal_margin < min(x1 - x0, y1 - y0) / 2, "goal_margin"),
        ]
        for ok, key in checks:
            if not ok:
                raise InvalidConfigError(f"invalid value for {key}: {getattr(self, key)!r}", key)

    @property
    def speed_unit(self):
        """World units per step of one goal-speed unit: 0.25% of the arena diagonal."""
        lo, hi = np.asarray(self.bounds, dtype=float)
        return 0.0025 * float(np.hypot(*(hi - lo)))

    @property
    def obs_dim(self):
        return 4 if self.env_id == "maze" else 6


# Per-environment defaults. The push agent is slower so that pushing a moving
# goal needs sustained closed-loop correction.
ENV_DEFAULTS = {
    "maze": {"max_steps": 120, "goal_radius": 0.05, "a_max": 0.4},
    "push": {"max_steps": 200, "goal_radius": 0.05, "a_max": 0.16},
}


def default_env_config(env_id, **overrides):
    if env_id not in ENV_DEFAULTS:
        raise InvalidConfigError(f"unknown env_id {env_id!r}", "env_id")
    return replace(EnvConfig(env_id=env_id, **ENV_DEFAULTS[env_id]), **overrides)


@dataclass(frozen=True, eq=False)
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    goal_vel: np.ndarray
    step_index: int = 0
    collided: bool = False
    path_side: tuple = field(default=())

    def __eq__(self, other):
        if not isinstance(other, EnvState):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("agent_pos", "agent_vel", "object_pos", "goal_pos", "goal_vel")
        ) and (self.step_index, self.collided) == (other.step_index, other.collided)


def _clip_to_bounds(p, cfg, margin=0.0):
    lo, hi = np.asarray(cfg.bounds, dtype=float)
    return np.clip(p, lo + margin, hi - margin)


def in_obstacle(p, inflate=AGENT_RADIUS):
    (x0, y0), (x1, y1) = MAZE_OBSTACLE
    return bool(x0 - inflate < p[0] < x1 + inflate and y0 - inflate < p[1] < y1 + inflate)


def env_reset(cfg, rng):
    """Place agent, object and goal with seeded jitter."""
    jit = rng.standard_normal(6)
    psi = rng.uniform(0.0, 2.0 * np.pi)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    if cfg.env_id == "maze":
        agent = np.asarray(MAZE_START) + cfg.start_jitter * jit[0:2]
        goal_pos = np.asarray(MAZE_GOAL) + cfg.goal_jitter * jit[2:4]
        object_pos = np.zeros(2)  # unused in the maze
    else:
        ring = np.array([np.cos(psi), np.sin(psi)])
        object_pos = np.asarray(PUSH_OBJECT) + cfg.start_jitter * jit[4:6]
        agent = object_pos + PUSH_START_RING * ring + cfg.start_jitter * jit[0:2]
        goal_pos = object_pos + PUSH_GOAL_RING * ring + cfg.goal_jitter * jit[2:4]
        object_pos = _clip_to_bounds(object_pos, cfg, OBJECT_RADIUS)
    if cfg.goal_speed > 0:
        goal_vel = cfg.goal_speed * cfg.speed_unit * np.array([np.cos(theta), np.sin(theta)])
    else:
        goal_vel = np.zeros(2)
    return EnvState(
        agent_pos=_clip_to_bounds(agent, cfg),
        agent_vel=np.zeros(2),
        object_pos=object_pos,
        goal_pos=_clip_to_bounds(goal_pos, cfg, cfg.goal_margin),
        goal_vel=goal_vel,
    )


def observe(s, cfg):
    """Noise-free observation features."""
    if cfg.env_id == "maze":
        return np.concatenate([s.agent_pos, s.goal_pos])
    # Object-relative features generalise across goal positions.
    return np.concatenate([s.agent_pos - s.object_pos, s.goal_pos - s.object_pos, s.object_pos])


def _reflect(pos, vel, lo, hi):
    pos, vel = pos.copy(), vel.copy()
    for k in range(2):
        if pos[k] < lo[k]:
            pos[k] = 2 * lo[k] - pos[k]
            vel[k] = -vel[k]
        elif pos[k] > hi[k]:
            pos[k] = 2 * hi[k] - pos[k]
            vel[k] = -vel[k]
    return pos, vel


def _push_contact(agent, obj, cfg):
    reach = OBJECT_RADIUS + AGENT_RADIUS
    d = obj - agent
    dist = float(np.hypot(*d))
    if dist >= reach:
        return obj
    if dist < 1e-12:
        return obj
    obj = agent + d / dist * reach
    return _clip_to_bounds(obj, cfg, OBJECT_RADIUS)


def _side(p, band=0.04):
    """-1 clearly left of the maze centreline, +1 clearly right, 0 inside the band."""
    dx = p[0] - 0.5
    return -1 if dx < -band else (1 if dx > band else 0)


def env_step(s, a, cfg, rng):
    """Advance one step; returns the new state and a (possibly noisy) observation."""
    if s.step_index >= cfg.max_steps:
        raise ContractViolation(f"episode already terminated at step {s.step_index}")
    a = np.asarray(a, dtype=float)
    if a.shape != (2,) or not np.isfinite(a).all():
        raise InvalidInputError(f"action must be a finite 2-vector, got {a!r}")
    speed = float(np.hypot(*a))
    if speed > cfg.a_max:
        a = a * (cfg.a_max / speed)
    agent = _clip_to_bounds(s.agent_pos + cfg.dt * a, cfg)
    object_pos = s.object_pos
    collided = s.collided
    if cfg.env_id == "push":
        object_pos = _push_contact(agent, object_pos, cfg)
    elif in_obstacle(agent):
        collided = True

    lo, hi = np.asarray(cfg.bounds, dtype=float)
    goal_pos, goal_vel = _reflect(s.goal_pos + s.goal_vel, s.goal_vel,
                                  lo + cfg.goal_margin, hi - cfg.goal_margin)
    path_side = s.path_side
    if cfg.env_id == "maze":
        side = _side(agent)
        if side != 0 and (not path_side or path_side[-1] != side):
            path_side = path_side + (side,)
    new = EnvState(agent, a, object_pos, goal_pos, goal_vel, s.step_index + 1, collided, path_side)
    obs = observe(new, cfg)
    if cfg.obs_noise_sigma > 0:
        obs = obs + cfg.obs_noise_sigma * rng.standard_normal(obs.shape)
    return new, obs


def goal_distance(s, cfg):
    target = s.agent_pos if cfg.env_id == "maze" else s.object_pos
    return float(np.hypot(*(target - s.goal_pos)))


def is_success(s, cfg):
    if cfg.env_id == "maze" and s.collided:
        return False
    return goal_distance(s, cfg) <= cfg.goal_radius


def mode_switches(s):
    """Number of left/right changes of the executed maze path."""
    return max(len(s.path_side) - 1, 0)
