"""All numeric defaults in one place, plus INI loading and object builders.

Precedence when resolving: command-line flags > config file > ``DEFAULTS``.
Config files use INI sections matching the top-level keys below; list-valued
entries (sweep axes, beta grids, hidden widths) are comma separated.
"""

from __future__ import annotations

import configparser
import copy
import io

from .errors import InvalidConfigError

LIST_KEYS = {("train", "hidden"), ("tune", "betas")} | {
    ("sweep", k) for k in ("env_id", "preset", "goal_speed", "h", "n_samples", "strategy",
                           "beta", "obs_noise_sigma")}

DEFAULTS = {
    "env": {"env_id": "maze", "goal_speed": 0.0, "obs_noise_sigma": 0.0,
            # 1 = use the variance preset's start/goal jitter at evaluation too
            "preset_jitter": True},
    "data": {"preset": "medium", "n": 100, "seed": 1, "mode_mix": 0.5},
    "policy": {"c": 1, "l": 16, "h": 1, "predict_states": False},
    "train": {"batch_size": 64, "steps": 8000, "learning_rate": 3e-4, "P_mean": -1.2,
              "P_std": 1.2, "sigma_data": 0.5, "seed": 0, "eval_fraction": 0.1,
              "hidden": (256, 256, 256), "eval_every": 500, "eval_samples": 1024},
    "sampler": {"sigma_max": 10.0, "sigma_min": 0.002, "n_steps": 18, "rho": 7.0},
    "strategy": {"kind": "random", "n_samples": 1, "beta": 0.0, "decay": 0.5,
                 "ensemble_decay": 0.5, "coherence_decay": 0.5, "apply_every_step": True,
                 "last_k": 0, "grad_target": "noisy_iterate"},
    # episodes = 0 picks the per-environment default below
    "eval": {"episodes": 0, "seed": 0},
    "tune": {"betas": (0.0, 0.05, 0.1, 0.2, 0.35, 0.6, 1.0, 2.0, 4.0)},
    "sweep": {"env_id": ("maze",), "preset": ("medium",), "goal_speed": (0.0,), "h": (1,),
              "n_samples": (1,), "strategy": ("random",), "beta": (0.0,),
              "obs_noise_sigma": (0.0,)},
}

EPISODES = {"maze": 200, "push": 100}

_ITEM_TYPES = {("train", "hidden"): int, ("tune", "betas"): float, ("sweep", "env_id"): str,
               ("sweep", "preset"): str, ("sweep", "goal_speed"): float, ("sweep", "h"): int,
               ("sweep", "n_samples"): int, ("sweep", "strategy"): str, ("sweep", "beta"): float,
               ("sweep", "obs_noise_sigma"): float}


def defaults():
    return copy.deepcopy(DEFAULTS)


def _parse_scalar(kind, text, name):
    text = str(text).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise InvalidConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}", name) from None


def parse_value(section, key, value):
    """Coerce ``value`` (string or already typed) to the type of the default."""
    name = f"{section}.{key}"
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise InvalidConfigError(f"unknown config key {name}", name)
    if (section, key) in LIST_KEYS:
        kind = _ITEM_TYPES[(section, key)]
        items = value.split(",") if isinstance(value, str) else list(value)
        items = [i for i in items if str(i).strip() != ""]
        if not items:
            raise InvalidConfigError(f"{name} must list at least one value", name)
        return tuple(_parse_scalar(kind, i, name) for i in items)
    return _parse_scalar(type(DEFAULTS[section][key]), value, name)


def merge(cfg, overrides):
    """Apply ``{section: {key: value}}`` overrides; ``None`` values are skipped."""
    out = copy.deepcopy(cfg)
    for section, items in overrides.items():
        for key, value in items.items():
            if value is not None:
                out.setdefault(section, {})[key] = parse_value(section, key, value)
    return out


def read_ini(text):
    """Parse INI text into typed overrides. Extra sections (e.g. manifests) are returned raw."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"malformed config: {exc}", "config") from None
    typed, extra = {}, {}
    for section in parser.sections():
        if section in DEFAULTS:
            typed[section] = {k: parse_value(section, k, v) for k, v in parser[section].items()}
        else:
            extra[section] = dict(parser[section])
    return typed, extra


def load(path=None, overrides=None):
    """Resolve defaults, then the file at ``path``, then ``overrides``."""
    cfg = defaults()
    extra = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {path}: {exc}", "config") from None
        typed, extra = read_ini(text)
        cfg = merge(cfg, typed)
    cfg = merge(cfg, overrides or {})
    return cfg, extra


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(i) for i in v)
    return str(v)


def dumps(cfg, extra=None):
    """Deterministic INI text for a resolved config plus optional raw sections."""
    buf = io.StringIO()
    for section in list(DEFAULTS) + sorted(set(cfg) - set(DEFAULTS)):
        if section not in cfg:
            continue
        buf.write(f"[{section}]\n")
        for key in sorted(cfg[section]):
            buf.write(f"{key} = {_fmt(cfg[section][key])}\n")
        buf.write("\n")
    for section, items in (extra or {}).items():
        buf.write(f"[{section}]\n")
        for key in sorted(items):
            buf.write(f"{key} = {items[key]}\n")
        buf.write("\n")
    return buf.getvalue()


# -- builders -------------------------------------------------------------

def episodes(cfg, env_id=None):
    n = cfg["eval"]["episodes"]
    if n < 0:
        raise InvalidConfigError("eval.episodes must be >= 0", "eval.episodes")
    return n or EPISODES[env_id or cfg["env"]["env_id"]]


def env_config(cfg, **extra):
    from . import env as envlib
    from .expert import get_preset

    e = cfg["env"]
    kw = {"goal_speed": e["goal_speed"], "obs_noise_sigma": e["obs_noise_sigma"]}
    if e["preset_jitter"]:
        preset = get_preset(cfg["data"]["preset"])
        kw.update(start_jitter=preset.start_jitter, goal_jitter=preset.goal_offset_var)
    kw.update(extra)
    return envlib.default_env_config(e["env_id"], **kw)


def preset(cfg):
    from .expert import get_preset
    return get_preset(cfg["data"]["preset"], cfg["data"]["mode_mix"])


def policy_config(cfg, obs_dim, action_dim=2):
    from .core import PolicyConfig
    p = cfg["policy"]
    return PolicyConfig(c=p["c"], l=p["l"], h=p["h"], action_dim=action_dim, obs_dim=obs_dim,
                        predict_states=p["predict_states"])


def train_config(cfg):
    from .train import TrainConfig
    return TrainConfig(**cfg["train"])


def schedule(cfg):
    from .infer import build_schedule
    s = cfg["sampler"]
    return build_schedule(s["sigma_max"], s["sigma_min"], s["n_steps"], s["rho"])


def guidance_config(cfg, beta=None):
    from .infer import GuidanceConfig
    s = cfg["strategy"]
    return GuidanceConfig(beta=s["beta"] if beta is None else beta, decay=s["decay"],
                          apply_every_step=s["apply_every_step"], last_k=s["last_k"],
                          grad_target=s["grad_target"])


def strategy_config(cfg):
    from .infer import StrategyConfig
    s = cfg["strategy"]
    return StrategyConfig(s["kind"], s["n_samples"], guidance_config(cfg), s["ensemble_decay"],
                          s["coherence_decay"])


def sweep_grid(cfg):
    return {k: list(v) for k, v in cfg["sweep"].items()}
