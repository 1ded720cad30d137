import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actdiff.core import ActionChunk, PriorChunk, make_rng
from actdiff.errors import (DivergenceError, EmptyOverlapError, InvalidConfigError, InvalidInputError,
                            InvalidStateError)
from actdiff.infer import (GuidanceConfig, SigmaSchedule, StrategyConfig, apply_guidance, build_schedule,
                           guidance_grad, guidance_loss, ode_sample, sample_batch, score,
                           select_coherent, select_random, temporal_ensemble)
from actdiff.model import ModelDims, denoise, init_params, precondition, zero_output_layer

from conftest import GAUSS_MEAN, GAUSS_STD


def test_schedule_reference_grid():
    s = build_schedule(80.0, 0.002, 18, 7.0)
    i = np.arange(18)
    ref = (80 ** (1 / 7) + i / 17 * (0.002 ** (1 / 7) - 80 ** (1 / 7))) ** 7
    np.testing.assert_allclose(s.grid[:18], ref, rtol=1e-12)
    assert s.grid[0] == 80.0 and s.grid[18] == 0.0 and len(s.grid) == 19
    assert np.all(np.diff(s.grid) < 0)


def test_schedule_linear_and_minimal():
    s = build_schedule(5.0, 1.0, 5, 1.0)
    np.testing.assert_allclose(s.grid, [5, 4, 3, 2, 1, 0])
    np.testing.assert_array_equal(build_schedule(3.0, 0.5, 2).grid, [3.0, 0.5, 0.0])
    for args in [(1.0, 2.0), (1.0, 0.0), (1.0, 0.5, 1)]:
        with pytest.raises(InvalidConfigError):
            build_schedule(*args)


def test_guidance_config_validation():
    with pytest.raises(InvalidConfigError):
        GuidanceConfig(beta=-1)
    with pytest.raises(InvalidConfigError):
        GuidanceConfig(decay=0)
    with pytest.raises(InvalidConfigError):
        GuidanceConfig(sign="ascent")
    with pytest.raises(InvalidConfigError):
        StrategyConfig("beam")
    g = GuidanceConfig(apply_every_step=False, last_k=2)
    assert [g.active(i, 5) for i in range(5)] == [False, False, False, True, True]


DIMS = ModelDims(l=2, action_dim=2, c=1, obs_dim=2, hidden=(8,))


def test_score_closed_forms():
    p = zero_output_layer(init_params(0, DIMS))
    rng = make_rng(0)
    x = rng.standard_normal(4)
    obs = rng.standard_normal(2)
    for sigma in (0.01, 0.5, 3.0):
        c_skip = precondition(sigma, p.sigma_data)[0]
        np.testing.assert_allclose(score(p, x, sigma, obs), (c_skip - 1) * x / sigma**2, rtol=1e-12)
    with pytest.raises(InvalidInputError):
        score(p, x, 0.0, obs)
    full = init_params(1, DIMS)
    d = denoise(full, x, 0.7, obs)
    # feeding the denoiser's own output back as the data estimate yields zero score
    np.testing.assert_allclose(score(full, x, 0.7, obs), (d - x) / 0.49, rtol=1e-12)


def test_score_gaussian_oracle(gaussian):
    p = gaussian.params
    for sigma in (0.25, 0.5, 1.0, 2.0):
        sd = np.hypot(GAUSS_STD, sigma)
        x = np.linspace(GAUSS_MEAN - 2 * sd, GAUSS_MEAN + 2 * sd, 201)
        est = score(p, x[:, None], sigma, np.zeros((201, 1))).ravel()
        true = -(x - GAUSS_MEAN) / sd**2
        rel_rms = np.sqrt(np.mean((est - true) ** 2) / np.mean(true**2))
        assert rel_rms < 0.10, (sigma, rel_rms)


def test_guidance_loss_examples():
    prior = PriorChunk(ActionChunk(np.array([[9.0], [0.1]])), 0)
    cur = ActionChunk(np.array([[0.3], [5.0]]))
    assert guidance_loss(cur, prior, 1) == pytest.approx(0.04)
    np.testing.assert_allclose(guidance_grad(cur, prior, 1), [[0.4], [0.0]])
    assert guidance_loss(prior.chunk, prior, 1, 0.5) == pytest.approx((9.0 - 0.1) ** 2)
    same = ActionChunk(np.array([[1.0], [1.0]]))
    assert guidance_loss(same, PriorChunk(same, 0), 1) == 0.0
    with pytest.raises(EmptyOverlapError):
        guidance_loss(cur, prior, 2)


@given(d0=st.floats(-5, 5), d1=st.floats(-5, 5))
def test_guidance_loss_brute_force(d0, d1):
    prior = np.array([[7.0], [1.0], [2.0]])
    cur = np.array([[1.0 + d0], [2.0 + d1], [-3.0]])
    expected = sum(0.5**k * (cur[k, 0] - prior[k + 1, 0]) ** 2 for k in range(2))
    assert guidance_loss(cur, prior, 1) == pytest.approx(expected, rel=1e-12, abs=1e-300)
    assert guidance_loss(cur, prior, 1) == pytest.approx(d0**2 + 0.5 * d1**2, rel=1e-12, abs=1e-12)


def test_guidance_grad_finite_differences():
    rng = make_rng(7)
    worst = 0.0
    for trial in range(100):
        l = int(rng.integers(2, 10))
        h = int(rng.integers(1, l))
        a = int(rng.integers(1, 4))
        decay = float(rng.uniform(0.1, 1.0))
        cur, prior = rng.standard_normal((l, a)), rng.standard_normal((l, a))
        g = guidance_grad(cur, prior, h, decay)
        i, j = rng.integers(l), rng.integers(a)
        e = np.zeros_like(cur)
        # the loss is quadratic, so central differences carry no truncation error;
        # a moderate step keeps round-off well below the tolerance
        eps = 1e-3
        e[i, j] = eps
        fd = (guidance_loss(cur + e, prior, h, decay) - guidance_loss(cur - e, prior, h, decay)) / (2 * eps)
        if i >= l - h:
            assert g[i, j] == 0.0
            assert abs(fd) < 1e-9
        else:
            worst = max(worst, abs(fd - g[i, j]) / max(abs(g[i, j]), abs(fd)))
    assert worst < 1e-8


def test_apply_guidance_examples():
    prior = PriorChunk(ActionChunk(np.array([[0.0], [0.1]])), 0)
    x = np.array([[0.3], [4.0]])
    cfg = GuidanceConfig(beta=0.5)
    out = apply_guidance(x, prior, cfg, 1, sigma=1.0, step_size=-1.0)
    np.testing.assert_allclose(out, [[0.3 - 0.2], [4.0]])
    np.testing.assert_array_equal(apply_guidance(x, prior, GuidanceConfig(beta=0), 1, 1.0, 1.0), x)
    on_prior = np.array([[0.1], [4.0]])
    np.testing.assert_array_equal(apply_guidance(on_prior, prior, cfg, 1, 1.0, 1.0), on_prior)
    np.testing.assert_array_equal(apply_guidance(x, prior, cfg, 2, 1.0, 1.0), x)


def test_single_step_zero_network():
    # one Euler step from sigma_max straight to 0 gives c_skip(sigma_max) * x
    p = zero_output_layer(init_params(0, DIMS))
    sch = SigmaSchedule(4.0, 4.0, 1, 7.0, np.array([4.0, 0.0]))
    x0 = 4.0 * make_rng(3).standard_normal((1, 2, 2))
    x, div = sample_batch(p, np.zeros((1, 2)), x0, sch)
    c_skip = precondition(4.0, p.sigma_data)[0]
    np.testing.assert_allclose(x, c_skip * x0, rtol=1e-13)
    assert div[0] == -1


def test_beta_zero_bit_identical():
    p = init_params(2, ModelDims(l=4, action_dim=2, c=1, obs_dim=3, hidden=(16, 16)))
    sch = build_schedule()
    obs = make_rng(1).standard_normal(3)
    prior = PriorChunk(ActionChunk(make_rng(2).standard_normal((4, 2))), 0)
    a = ode_sample(p, obs, sch, make_rng(5))
    b = ode_sample(p, obs, sch, make_rng(5), guidance=(GuidanceConfig(beta=0.0), prior), h=1)
    assert a.values.tobytes() == b.values.tobytes()
    c = ode_sample(p, obs, sch, make_rng(5), guidance=(GuidanceConfig(beta=0.5), prior), h=1)
    assert c.values.tobytes() != a.values.tobytes()


def test_divergence_raises():
    p = init_params(2, ModelDims(l=4, action_dim=1, c=1, obs_dim=1, hidden=(8,)))
    prior = PriorChunk(ActionChunk(np.full((4, 1), 1e6)), 0)
    with pytest.raises(DivergenceError) as err:
        ode_sample(p, [0.0], build_schedule(), make_rng(0), guidance=(GuidanceConfig(beta=1e9), prior), h=1)
    assert err.value.step == 0


def test_select_random():
    c = [ActionChunk(np.full((2, 1), float(i))) for i in range(4)]
    assert select_random(c[:1], make_rng(0)) is c[0]
    assert select_random(c, make_rng(3)) is select_random(c, make_rng(3))
    rng = make_rng(4)
    picks = np.array([int(select_random(c, rng).values[0, 0]) for _ in range(10_000)])
    freq = np.bincount(picks, minlength=4) / 10_000
    assert np.all((freq >= 0.22) & (freq <= 0.28))
    with pytest.raises(InvalidInputError):
        select_random([], rng)


def test_select_coherent_examples():
    prior = PriorChunk(ActionChunk(np.array([[0.0], [0.1]])), 0)
    far = ActionChunk(np.array([[0.3], [0.0]]))   # loss 0.04
    near = ActionChunk(np.array([[0.2], [0.0]]))  # loss 0.01
    assert select_coherent([far, near], prior, 1) is near
    assert select_coherent([far, prior.chunk, near], prior, 1) is prior.chunk
    twin = ActionChunk(near.values.copy())
    assert select_coherent([near, twin], prior, 1) is near
    # no overlap: falls back to the first candidate or a seeded random pick
    assert select_coherent([far, near], prior, 2) is far
    with pytest.raises(InvalidInputError):
        select_coherent([], prior, 1)


def test_select_coherent_brute_force():
    rng = make_rng(11)
    for _ in range(1000):
        l = int(rng.integers(2, 9))
        h = int(rng.integers(1, l))
        cands = [ActionChunk(rng.standard_normal((l, 2))) for _ in range(16)]
        prior = PriorChunk(ActionChunk(rng.standard_normal((l, 2))), 0)
        best, best_loss = None, np.inf
        for c in cands:
            loss = sum(0.5**k * np.sum((c.values[k] - prior.chunk.values[k + h]) ** 2)
                       for k in range(l - h))
            if loss < best_loss:
                best, best_loss = c, loss
        assert select_coherent(cands, prior, h) is best


def test_temporal_ensemble_examples():
    a = ActionChunk(np.array([[0.0], [0.0], [0.0]]))
    b = ActionChunk(np.array([[1.0], [1.0], [1.0]]))
    np.testing.assert_allclose(temporal_ensemble([(0, a), (1, b)], 1, 0.5), [2 / 3])
    np.testing.assert_array_equal(temporal_ensemble([(2, b)], 3, 0.5), [1.0])
    np.testing.assert_array_equal(temporal_ensemble([(0, b), (1, b)], 2, 0.5), [1.0])
    with pytest.raises(InvalidStateError):
        temporal_ensemble([(0, a)], 3, 0.5)


def test_bimodal_sampler(bimodal):
    sch = build_schedule()
    x0 = sch.sigma_max * make_rng(1).standard_normal((10_000, 1, 1))
    x, div = sample_batch(bimodal.params, np.zeros((10_000, 1)), x0, sch)
    x = x.ravel()
    assert np.all(div == -1)
    near = np.minimum(np.abs(x - 1), np.abs(x + 1)) < 0.25
    assert near.mean() >= 0.95
    assert 0.4 <= np.mean(x > 0) <= 0.6
    # terminal samples sit closer to the data histogram than the initial noise does
    bins = np.linspace(-3, 3, 61)
    rng = make_rng(0)
    data = np.where(rng.uniform(size=10_000) < 0.5, -1.0, 1.0) + 0.05 * rng.standard_normal(10_000)
    hd = np.histogram(data, bins)[0] / 10_000

    def dist(s):
        return 0.5 * np.abs(np.histogram(s, bins)[0] / len(s) - hd).sum()

    assert dist(x) < dist(x0.ravel())
