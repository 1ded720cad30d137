import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actdiff.core import (ActionChunk, Dataset, PolicyConfig, PriorChunk, Trajectory, dataset_read,
                          dataset_write, extract_overlap, make_rng, overlap_weights)
from actdiff.errors import InvalidConfigError, InvalidInputError, ParseError, VersionError


def test_overlap_weights_examples():
    np.testing.assert_array_equal(overlap_weights(8, 4, 0.5), [1.0, 0.5, 0.25, 0.125])
    assert overlap_weights(8, 8, 0.5).size == 0
    np.testing.assert_array_equal(overlap_weights(4, 1, 1.0), [1.0, 1.0, 1.0])


@pytest.mark.parametrize("l,h", [(4, 0), (4, 5), (1, 2)])
def test_overlap_weights_rejects_bad_h(l, h):
    with pytest.raises(InvalidConfigError):
        overlap_weights(l, h)


@given(l=st.integers(1, 32), data=st.data(), decay=st.floats(0.01, 0.99))
def test_overlap_weights_strictly_decreasing(l, data, decay):
    h = data.draw(st.integers(1, l))
    w = overlap_weights(l, h, decay)
    assert len(w) == l - h
    assert np.all(np.diff(w) < 0)
    if len(w):
        assert w[0] == 1.0


def _rows(n, tag):
    return np.array([[tag * 100 + i, -(tag * 100 + i)] for i in range(n)], dtype=float)


def test_extract_overlap_examples():
    prior = PriorChunk(ActionChunk(_rows(4, 1)), birth_time=0)
    cur = ActionChunk(_rows(4, 2))
    p, c = extract_overlap(prior, cur, 2)
    np.testing.assert_array_equal(p, _rows(4, 1)[2:])
    np.testing.assert_array_equal(c, _rows(4, 2)[:2])

    p, c = extract_overlap(prior, cur, 4)
    assert p.shape == (0, 2) and c.shape == (0, 2)

    prior3 = PriorChunk(ActionChunk(_rows(3, 1)), 5)
    p, c = extract_overlap(prior3, ActionChunk(_rows(3, 2)), 1)
    np.testing.assert_array_equal(p, _rows(3, 1)[1:])
    np.testing.assert_array_equal(c, _rows(3, 2)[:2])


def test_extract_overlap_shape_mismatch():
    with pytest.raises(InvalidInputError):
        extract_overlap(PriorChunk(ActionChunk(np.zeros((4, 2))), 0), ActionChunk(np.zeros((3, 2))), 1)


@given(l=st.integers(1, 20), data=st.data(), t=st.integers(0, 1000))
def test_extract_overlap_aligns_absolute_time(l, data, t):
    h = data.draw(st.integers(1, l))
    birth = t
    now = t + h
    # Entries encode the absolute timestep they are planned for.
    prior = PriorChunk(ActionChunk(np.repeat((birth + np.arange(l))[:, None], 2, 1)), birth)
    cur = ActionChunk(np.repeat((now + np.arange(l))[:, None], 2, 1))
    p, c = extract_overlap(prior, cur, h)
    assert len(p) == len(c) == l - h
    np.testing.assert_array_equal(p, c)


def test_policy_config_invariants():
    PolicyConfig(c=2, l=8, h=8)
    for kwargs in ({"h": 0}, {"l": 4, "h": 5}, {"c": 0}, {"action_dim": 0}, {"obs_dim": 0}):
        with pytest.raises(InvalidConfigError):
            PolicyConfig(**kwargs)


def test_trajectory_validation():
    with pytest.raises(InvalidInputError):
        Trajectory(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        Trajectory(np.full((1, 2), np.nan), np.zeros((1, 2)))
    with pytest.raises(InvalidInputError):
        Dataset(())


def _dataset(rng, n=3):
    trajs = [Trajectory(rng.standard_normal((T, 4)), rng.standard_normal((T, 2)))
             for T in rng.integers(1, 30, n)]
    return Dataset(tuple(trajs), {"preset": "low", "seed": 3, "env_id": "maze"})


def test_dataset_roundtrip(tmp_path):
    d = _dataset(make_rng(0), n=1)
    path = tmp_path / "d.bin"
    dataset_write(d, path)
    back = dataset_read(path)
    assert back == d
    assert back.trajectories[0].states.tobytes() == d.trajectories[0].states.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5))
def test_dataset_roundtrip_bit_exact(tmp_path_factory, seed, n):
    d = _dataset(make_rng(seed), n)
    path = tmp_path_factory.mktemp("ds") / "d.bin"
    dataset_write(d, path)
    assert dataset_read(path) == d


def test_dataset_truncated(tmp_path):
    path = tmp_path / "d.bin"
    dataset_write(_dataset(make_rng(1)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(ParseError) as err:
        dataset_read(path)
    assert err.value.offset == len(raw) - 5
    path.write_bytes(raw[:6])
    with pytest.raises(ParseError):
        dataset_read(path)


def _rewrite_header(path, edit):
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", raw, 0)
    header = json.loads(raw[12:12 + hlen])
    edit(header)
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<4sII", magic, version, len(blob)) + blob + raw[12 + hlen:])


def test_dataset_mismatched_dims(tmp_path):
    path = tmp_path / "d.bin"
    dataset_write(_dataset(make_rng(2)), path)

    def edit(h):
        h["trajectories"][0]["action_dim"] = 3
    _rewrite_header(path, edit)
    with pytest.raises(InvalidInputError):
        dataset_read(path)


def test_dataset_version_mismatch(tmp_path):
    path = tmp_path / "d.bin"
    dataset_write(_dataset(make_rng(3)), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        dataset_read(path)


def test_make_rng_streams():
    a = make_rng(7, 1).standard_normal(4)
    assert np.array_equal(a, make_rng(7, 1).standard_normal(4))
    assert not np.array_equal(a, make_rng(7, 2).standard_normal(4))
