"""Session-scoped trained models shared by the slower tests.

Training is deterministic, so checkpoints may be cached between sessions by
pointing ``ACTDIFF_TEST_CACHE`` at a directory.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from actdiff import config
from actdiff.core import PolicyConfig, make_rng
from actdiff.expert import build_dataset
from actdiff.train import Normalizer, TrainConfig, load_checkpoint, save_checkpoint, train, train_arrays

ONE_D = PolicyConfig(c=1, l=1, h=1, action_dim=1, obs_dim=1)
ONE_D_TRAIN = TrainConfig(steps=8000, hidden=(64, 64), learning_rate=1e-3, batch_size=128)


# (start, end) wall-clock of every training run in this session
TRAIN_TIMES = {}
ACCEPTANCE = pytest.StashKey[dict]()


def _timed(name, build):
    t0 = time.time()
    out = build()
    TRAIN_TIMES[name] = (t0, time.time())
    return out


def _cached(name, build):
    root = os.environ.get("ACTDIFF_TEST_CACHE")
    if not root:
        return _timed(name, build)
    path = Path(root) / f"{name}.ck"
    if path.exists():
        return load_checkpoint(path)
    ck = _timed(name, build)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, path)
    return ck


def reference_checkpoint(env_id, preset):
    """Model trained with the documented defaults on 100 expert demos."""
    cfg, _ = config.load(overrides={"env": {"env_id": env_id}, "data": {"preset": preset}})

    def build():
        env_cfg = config.env_config(cfg)
        ds = build_dataset(cfg["data"]["n"], env_cfg, config.preset(cfg), cfg["data"]["seed"])
        return train(ds, config.policy_config(cfg, env_cfg.obs_dim), config.train_config(cfg))

    return _cached(f"{env_id}_{preset}", build)


def train_1d(samples, sigma_data, name):
    """Unconditional 1-D model; the identity normaliser keeps data in raw units."""
    n = len(samples)
    norm = Normalizer(np.zeros(1), np.ones(1), np.zeros(1), np.full(1, sigma_data), sigma_data)
    cfg = TrainConfig(**{**ONE_D_TRAIN.__dict__, "sigma_data": sigma_data})
    return _cached(name, lambda: train_arrays(np.zeros((n, 1, 1)), np.asarray(samples).reshape(n, 1, 1),
                                              ONE_D, cfg, norm))


@pytest.fixture(scope="session")
def bimodal():
    rng = make_rng(0)
    data = np.where(rng.uniform(size=4000) < 0.5, -1.0, 1.0) + 0.05 * rng.standard_normal(4000)
    return train_1d(data, 1.0, "bimodal")


GAUSS_MEAN, GAUSS_STD = 0.3, 0.4


@pytest.fixture(scope="session")
def gaussian():
    data = GAUSS_MEAN + GAUSS_STD * make_rng(0).standard_normal(4000)
    return train_1d(data, 0.5, "gaussian")


@pytest.fixture(scope="session")
def maze_low():
    return reference_checkpoint("maze", "low")


@pytest.fixture(scope="session")
def maze_medium():
    return reference_checkpoint("maze", "medium")


@pytest.fixture(scope="session")
def maze_high():
    return reference_checkpoint("maze", "high")


@pytest.fixture(scope="session")
def push_medium():
    return reference_checkpoint("push", "medium")


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
