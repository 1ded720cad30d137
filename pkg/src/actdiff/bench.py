"""Closed-loop evaluation, parameter sweeps, CSV output and SVG plots."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import env as envlib
from . import expert as expertlib
from .core import ActionChunk, PriorChunk, make_rng
from .errors import ContractViolation, InvalidConfigError
from .infer import (GuidanceConfig, StrategyConfig, build_schedule, sample_batch, select_coherent,
                    select_random, temporal_ensemble)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps_used: int
    final_goal_distance: float
    mode_switches: int
    seed: int
    diverged: bool = False


@dataclass(frozen=True)
class ResultRow:
    env_id: str
    preset: str
    goal_speed: float
    h: int
    n_samples: int
    strategy: str
    beta: float
    obs_noise_sigma: float
    n_episodes: int
    success_rate: float
    ci_low: float
    ci_high: float
    mean_steps: float


CSV_HEADER = [f.name for f in fields(ResultRow)]


def wilson_interval(k, n, z=1.959963984540054):
    """Wilson score interval for ``k`` successes out of ``n`` trials."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # clamp so round-off never excludes p itself (e.g. k == n)
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


class _Episode:
    """Mutable per-episode bookkeeping for the batched runner."""

    def __init__(self, seed, env_cfg, policy, norm):
        self.seed = seed
        self.rng = make_rng(seed)
        self.state = envlib.env_reset(env_cfg, self.rng)
        obs = envlib.observe(self.state, env_cfg)
        if env_cfg.obs_noise_sigma > 0:
            obs = obs + env_cfg.obs_noise_sigma * self.rng.standard_normal(obs.shape)
        self.history = [obs] * policy.c
        self.t = 0
        self.queue = []
        self.prior = None
        self.prior_norm = None
        self.buffer = []
        self.done = False
        self.diverged = False

    def window(self, c, norm):
        return norm.obs(np.stack(self.history[-c:])).reshape(-1)


def _check_dims(ckpt, env_cfg, policy):
    p = ckpt.params.dims
    if (p.l, p.action_dim, p.c, p.obs_dim) != (policy.l, policy.channels, policy.c, policy.obs_dim):
        raise InvalidConfigError(f"checkpoint dims {p} do not match policy {policy}", "policy")
    if env_cfg.obs_dim != policy.obs_dim or policy.action_dim != 2:
        raise InvalidConfigError(
            f"env {env_cfg.env_id} observes {env_cfg.obs_dim} dims / 2 actions, "
            f"policy expects {policy.obs_dim} / {policy.action_dim}", "policy")


def run_episodes(ckpt, env_cfg, policy, strategy, seeds, schedule=None):
    """Run one episode per seed, batching all denoiser calls across episodes."""
    _check_dims(ckpt, env_cfg, policy)
    schedule = schedule or build_schedule()
    norm = ckpt.norm
    eps = [_Episode(int(s), env_cfg, policy, norm) for s in seeds]
    guidance = strategy.guidance if strategy.kind == "selfgad" else None
    n = strategy.n_samples

    while True:
        live = [e for e in eps if not e.done]
        if not live:
            break
        replan = [e for e in live if not e.queue]
        if replan:
            _replan(ckpt, replan, strategy, guidance, schedule, policy, n)
        for e in live:
            if e.done:
                continue
            if strategy.kind == "ensemble":
                action = temporal_ensemble(e.buffer, e.t, strategy.ensemble_decay)[:policy.action_dim]
                e.queue.pop(0)
            else:
                action = e.queue.pop(0)
            e.state, obs = envlib.env_step(e.state, action, env_cfg, e.rng)
            e.history.append(obs)
            del e.history[:-policy.c]
            e.t += 1
            if (envlib.is_success(e.state, env_cfg) or e.state.collided
                    or e.state.step_index >= env_cfg.max_steps):
                e.done = True

    return [
        EpisodeResult(
            success=bool(envlib.is_success(e.state, env_cfg)) and not e.diverged,
            steps_used=int(e.state.step_index),
            final_goal_distance=envlib.goal_distance(e.state, env_cfg),
            mode_switches=envlib.mode_switches(e.state) if env_cfg.env_id == "maze" else 0,
            seed=e.seed,
            diverged=e.diverged,
        )
        for e in eps
    ]


def _replan(ckpt, eps, strategy, guidance, schedule, policy, n):
    # a_dim counts every diffused channel; only the leading action_dim are executed
    l, a_dim, h = policy.l, policy.channels, policy.h
    norm = ckpt.norm
    obs, x0, priors, mask = [], [], [], []
    for e in eps:
        if e.prior is not None and e.t - e.prior.birth_time != h:
            raise ContractViolation(
                f"prior born at {e.prior.birth_time} queried at {e.t} with h={h}")
        w = e.window(policy.c, norm)
        for _ in range(n):
            obs.append(w)
        x0.append(schedule.sigma_max * e.rng.standard_normal((n, l, a_dim)))
        has_prior = e.prior is not None
        priors.extend([e.prior_norm if has_prior else np.zeros((l, a_dim))] * n)
        mask.extend([has_prior] * n)
    samples, div = sample_batch(ckpt.params, np.stack(obs), np.concatenate(x0), schedule,
                                guidance, np.stack(priors), np.array(mask), h)
    samples = samples.reshape(len(eps), n, l, a_dim)
    div = div.reshape(len(eps), n)
    for e, cand_norm, d in zip(eps, samples, div):
        if (d >= 0).all():
            e.diverged = True
            e.done = True
            continue
        ok = np.flatnonzero(d < 0)
        cands = [ActionChunk(norm.unact(cand_norm[k])) for k in ok]
        if strategy.kind == "coherence" and e.prior is not None:
            chosen = select_coherent(cands, e.prior, h, strategy.coherence_decay, e.rng)
        else:
            chosen = select_random(cands, e.rng)
        e.prior = PriorChunk(chosen, e.t)
        e.prior_norm = norm.act(chosen.values)
        e.queue = [np.asarray(chosen.values[k, :policy.action_dim]) for k in range(h)]
        if strategy.kind == "ensemble":
            e.buffer.append((e.t, chosen))
            e.buffer = [(b, c) for b, c in e.buffer if b + l > e.t]


def rollout(ckpt, env_cfg, policy, strategy, seed, schedule=None):
    return run_episodes(ckpt, env_cfg, policy, strategy, [seed], schedule)[0]


def rollout_expert(env_cfg, preset, seed):
    """Closed-loop episode driven by the scripted expert instead of a checkpoint."""
    rng = make_rng(seed)
    s = envlib.env_reset(env_cfg, rng)
    mode = expertlib.sample_mode(preset, rng)
    pilot = expertlib.make_expert(env_cfg, mode, preset, rng)
    while not (envlib.is_success(s, env_cfg) or s.collided or s.step_index >= env_cfg.max_steps):
        s, _ = envlib.env_step(s, pilot.act(s, env_cfg), env_cfg, rng)
    return EpisodeResult(envlib.is_success(s, env_cfg), s.step_index, envlib.goal_distance(s, env_cfg),
                         envlib.mode_switches(s) if env_cfg.env_id == "maze" else 0, int(seed))


def summarize(cell, results):
    k = sum(r.success for r in results)
    n = len(results)
    lo, hi = wilson_interval(k, n)
    return ResultRow(
        env_id=cell["env_id"], preset=cell["preset"], goal_speed=float(cell["goal_speed"]),
        h=int(cell["h"]), n_samples=int(cell["n_samples"]), strategy=cell["strategy"],
        beta=float(cell["beta"]), obs_noise_sigma=float(cell["obs_noise_sigma"]), n_episodes=n,
        success_rate=k / n if n else 0.0, ci_low=lo, ci_high=hi,
        mean_steps=float(np.mean([r.steps_used for r in results])) if n else 0.0,
    )


GRID_AXES = ("env_id", "preset", "goal_speed", "h", "n_samples", "strategy", "beta", "obs_noise_sigma")
GRID_DEFAULTS = {"env_id": "maze", "preset": "medium", "goal_speed": 0.0, "h": 1, "n_samples": 1,
                 "strategy": "random", "beta": 0.0, "obs_noise_sigma": 0.0}


def expand_grid(grid):
    """Cartesian product of the declared axes; undeclared axes take defaults."""
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise InvalidConfigError(f"unknown sweep axes {sorted(unknown)}", sorted(unknown)[0])
    axes = [list(grid.get(k, [GRID_DEFAULTS[k]])) for k in GRID_AXES]
    cells, seen = [], set()
    for combo in itertools.product(*axes):
        cell = dict(zip(GRID_AXES, combo))
        # beta only matters for guided sampling; collapse it elsewhere
        if cell["strategy"] != "selfgad":
            cell["beta"] = 0.0
        key = tuple(cell.values())
        if key not in seen:
            seen.add(key)
            cells.append(cell)
    return cells


def cell_env_config(cell, env_overrides=None, preset_jitter=True):
    """Environment for a grid cell; the preset's start/goal jitter applies at evaluation too."""
    kw = {"goal_speed": float(cell["goal_speed"]), "obs_noise_sigma": float(cell["obs_noise_sigma"])}
    if preset_jitter:
        preset = expertlib.get_preset(cell["preset"])
        kw.update(start_jitter=preset.start_jitter, goal_jitter=preset.goal_offset_var)
    kw.update((env_overrides or {}).get(cell["env_id"], {}))
    return envlib.default_env_config(cell["env_id"], **kw)


def run_cell(cell, checkpoints, episodes, base_seed, env_overrides=None, schedule=None,
             guidance_defaults=None, preset_jitter=True):
    key = (cell["env_id"], cell["preset"])
    if key not in checkpoints:
        raise InvalidConfigError(f"no checkpoint for cell {cell}", f"checkpoint:{key[0]}/{key[1]}")
    ckpt = checkpoints[key]
    env_cfg = cell_env_config(cell, env_overrides, preset_jitter)
    policy = ckpt.policy.with_h(int(cell["h"]))
    guidance = replace(guidance_defaults or GuidanceConfig(), beta=float(cell["beta"]))
    strategy = StrategyConfig(cell["strategy"], int(cell["n_samples"]), guidance)
    seeds = [base_seed + i for i in range(episodes)]
    return run_episodes(ckpt, env_cfg, policy, strategy, seeds, schedule)


def sweep(grid, checkpoints, episodes, base_seed, **kwargs):
    """Evaluate every grid cell; cells are independent so order does not matter."""
    cells = expand_grid(grid)
    for cell in cells:
        if (cell["env_id"], cell["preset"]) not in checkpoints:
            raise InvalidConfigError(f"no checkpoint for cell {cell}",
                                     f"checkpoint:{cell['env_id']}/{cell['preset']}")
    rows = []
    for cell in cells:
        results = run_cell(cell, checkpoints, episodes, base_seed, **kwargs)
        rows.append(summarize(cell, results))
        log.info("%s -> %.3f", cell, rows[-1].success_rate)
    return rows


def tune_beta(ckpt, env_cfg, betas, episodes, base_seed=0, policy=None, n_samples=1,
              schedule=None, guidance_defaults=None):
    """Grid search over guidance weight; returns (best beta, [(beta, ResultRow)])."""
    betas = [float(b) for b in betas]
    if not betas:
        raise InvalidConfigError("beta grid is empty", "betas")
    policy = policy or ckpt.policy
    curve = []
    for beta in betas:
        g = replace(guidance_defaults or GuidanceConfig(), beta=beta)
        strategy = StrategyConfig("selfgad", n_samples, g)
        res = run_episodes(ckpt, env_cfg, policy, strategy,
                           [base_seed + i for i in range(episodes)], schedule)
        cell = {"env_id": env_cfg.env_id, "preset": ckpt.meta.get("preset", ""),
                "goal_speed": env_cfg.goal_speed, "h": policy.h, "n_samples": n_samples,
                "strategy": "selfgad", "beta": beta, "obs_noise_sigma": env_cfg.obs_noise_sigma}
        curve.append((beta, summarize(cell, res)))
    best = max(curve, key=lambda bc: (bc[1].success_rate, -bc[0]))[0]
    return best, curve


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    if not rows:
        log.warning("no rows to write; %s holds only the header", path)
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return bool(rows)


def read_csv(path):
    types = {f.name: f.type for f in fields(ResultRow)}
    conv = {"str": str, "float": float, "int": int}
    out = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            out.append(ResultRow(**{k: conv[types[k]](v) for k, v in rec.items()}))
    return out


# -- SVG plots ------------------------------------------------------------

PRESET_ORDER = {"low": 0, "medium": 1, "high": 2}
PLOTS = (
    ("samples", "n_samples", "number of samples"),
    ("horizon", "h", "execution horizon h"),
    ("preset", "preset", "dataset variance preset"),
    ("beta", "beta", "guidance weight beta"),
)
_W, _H, _PAD = 480, 320, 56
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _xkey(field, v):
    return (PRESET_ORDER.get(v, 99), v) if field == "preset" else (v,)


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg(title, xlabel, series):
    """Line chart with Wilson error bars; x values are categorical, sorted."""
    xs = sorted({x for pts in series.values() for x, _ in pts}, key=lambda v: v[1])
    pos = {x[0]: i for i, x in enumerate(xs)}
    n = len(xs)

    def px(i):
        return _PAD + (i + 0.5) * (_W - 2 * _PAD) / n

    def py(v):
        return _H - _PAD - v * (_H - 2 * _PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<line x1="{_PAD}" y1="{py(0):.1f}" x2="{_W - _PAD}" y2="{py(0):.1f}" stroke="black"/>',
           f'<line x1="{_PAD}" y1="{py(0):.1f}" x2="{_PAD}" y2="{py(1):.1f}" stroke="black"/>']
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{_PAD - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for x, i in pos.items():
        out.append(f'<text x="{px(i):.1f}" y="{py(0) + 16:.1f}" text-anchor="middle">{_esc(_fmt(x))}</text>')
    out.append(f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{_H / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_H / 2:.1f})">success rate</text>')
    for k, (label, pts) in enumerate(sorted(series.items())):
        color = _COLORS[k % len(_COLORS)]
        pts = sorted(pts, key=lambda p: p[0][1])
        coords = [(px(pos[x[0]]), row) for x, row in pts]
        if len(coords) > 1:
            path = " ".join(f"{cx:.1f},{py(r.success_rate):.1f}" for cx, r in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for cx, r in coords:
            out.append(f'<line x1="{cx:.1f}" y1="{py(r.ci_low):.1f}" x2="{cx:.1f}" '
                       f'y2="{py(r.ci_high):.1f}" stroke="{color}"/>')
            out.append(f'<circle cx="{cx:.1f}" cy="{py(r.success_rate):.1f}" r="3" fill="{color}"/>')
        ly = 34 + 14 * k
        out.append(f'<rect x="{_W - _PAD - 150}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{_W - _PAD - 136}" y="{ly + 1}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(csv_path, out_dir):
    """Write one SVG per plot kind (the horizon plot is split by goal speed).

    Series are the strategies crossed with any other axis that varies across
    the rows; returns the written paths, empty when the CSV holds no rows.
    """
    rows = read_csv(csv_path)
    if not rows:
        log.warning("%s has no rows; no plots written", csv_path)
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    varying = [a for a in GRID_AXES if len({getattr(r, a) for r in rows}) > 1]
    written = []
    for name, field, xlabel in PLOTS:
        splits = {}
        for r in rows:
            key = r.goal_speed if name == "horizon" else None
            splits.setdefault(key, []).append(r)
        for split, group in sorted(splits.items(), key=lambda kv: (kv[0] is not None, kv[0])):
            series = {}
            for r in group:
                extra = [f"{a}={getattr(r, a)}" for a in varying
                         if a not in (field, "strategy") and not (name == "horizon" and a == "goal_speed")]
                label = " ".join([r.strategy] + extra)
                x = getattr(r, field)
                series.setdefault(label, []).append(((x, _xkey(field, x)), r))
            title = f"success vs {xlabel}" + ("" if split is None else f" (goal speed {split:g})")
            fname = f"{name}.svg" if split is None else f"{name}_speed{split:g}.svg"
            path = out_dir / fname
            try:
                path.write_text(_svg(title, xlabel, series))
            except OSError as exc:
                raise OSError(f"could not write {path}: {exc}") from exc
            written.append(path)
    return written
