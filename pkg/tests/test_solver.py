import math

import numpy as np
import pytest

from featsr.errors import DivergedSampleError
from featsr.numerics import RngStream
from featsr.sde import NoiseSchedule, marginal_var, sigma
from featsr.solver import SamplerConfig, em_reverse_step, sample, write_trace
from oracles import mixture_score

S = NoiseSchedule()


def test_config_validation_and_grid():
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    cfg = SamplerConfig(steps=2000)
    grid = cfg.time_grid()
    assert grid[0] == 1.0 and grid[-1] == S.t_floor
    assert len(grid) == 2001
    assert np.allclose(np.diff(grid), -cfg.dt, rtol=1e-9, atol=0)


def test_em_step_zero_score_zero_noise():
    x = np.array([1.0, -2.0])
    assert np.array_equal(em_reverse_step(x, 0.5, 0.01, np.zeros(2), S, z=np.zeros(2)), x)


def test_em_step_zero_dt():
    x = np.array([1.0, -2.0])
    out = em_reverse_step(x, 0.5, 0.0, np.array([3.0, 4.0]), S, RngStream(0))
    assert np.array_equal(out, x)


def test_em_step_hand_value():
    # pick the schedule so that g(t) = 2 at t = 0.5
    T = 1.0
    ratio = 10.0
    smin = 2.0 / math.sqrt(2 * math.log(ratio) / T) / math.sqrt(ratio)
    sched = NoiseSchedule(smin, smin * ratio, T)
    out = em_reverse_step(np.array([1.0]), 0.5, 0.01, np.array([-0.25]), sched, z=np.zeros(1))
    assert math.isclose(out[0], 0.99, rel_tol=1e-12)


def test_em_step_errors():
    with pytest.raises(ValueError):
        em_reverse_step(np.ones(2), 0.5, 0.01, np.ones(3), S, z=np.zeros(2))
    with pytest.raises(ValueError):
        em_reverse_step(np.ones(2), 0.5, 0.01, np.ones(2), S, z=np.zeros(3))
    with pytest.raises(ValueError):
        em_reverse_step(np.ones(2), 0.1, 0.2, np.ones(2), S, z=np.zeros(2))


def test_trace_hits_grid_endpoints(tmp_path):
    trace = []
    cfg = SamplerConfig(steps=50)
    score = lambda x, t: -x / (marginal_var(S, t) + 1.0)
    sample(score, (4,), cfg, RngStream(0), trace=trace)
    assert len(trace) == 51
    assert trace[0][1] == 1.0 and trace[-1][1] == S.t_floor
    steps = np.diff([r[1] for r in trace[:-1]])
    assert np.allclose(steps, -cfg.dt, rtol=1e-9, atol=0)
    write_trace(tmp_path / "t.csv", trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,t,x_norm" and len(lines) == 52


def test_single_step_contract():
    calls = []

    def score(x, t):
        calls.append(t)
        return -x / (marginal_var(S, t) + 1.0)

    out = sample(score, (3,), SamplerConfig(steps=1), RngStream(1))
    assert calls == [1.0, S.t_floor]
    assert np.all(np.isfinite(out))
    calls.clear()
    sample(score, (3,), SamplerConfig(steps=1, denoise_final=False), RngStream(1))
    assert calls == [1.0]


def test_deterministic_given_seed():
    score = lambda x, t: -x / (marginal_var(S, t) + 1.0)
    a = sample(score, (10,), SamplerConfig(steps=100), RngStream(5, 3))
    b = sample(score, (10,), SamplerConfig(steps=100), RngStream(5, 3))
    assert np.array_equal(a, b)


def test_divergence_reports_step():
    def score(x, t):
        return np.full_like(x, np.nan) if t < 0.55 else np.zeros_like(x)

    with pytest.raises(DivergedSampleError) as ei:
        sample(score, (2,), SamplerConfig(steps=10), RngStream(0))
    assert ei.value.step == 5


def test_point_mass_recovery():
    # target N(3, 1e-4): the exact score of the noised marginal
    var0 = 1e-4
    score = lambda x, t: -(x - 3.0) / (var0 + marginal_var(S, t))
    x = sample(score, (2000,), SamplerConfig(steps=2000), RngStream(31, 0))
    assert abs(x.mean() - 3.0) < 0.1


def _mixture_stats(x):
    pos = x > 0
    return pos.mean(), x[pos].mean(), x[~pos].mean()


def test_mixture_recovery_and_no_nans():
    kv = lambda t: marginal_var(S, t)
    score = lambda x, t: mixture_score(x, t, [0.5, 0.5], [-2.0, 2.0], [0.1, 0.1], kv)
    x = sample(score, (5000,), SamplerConfig(steps=2000), RngStream(41, 0))
    assert np.all(np.isfinite(x))
    w, mp, mn = _mixture_stats(x)
    assert abs(w - 0.5) < 0.05
    assert abs(mp - 2.0) < 0.1 and abs(mn + 2.0) < 0.1


def test_step_doubling_weak_convergence():
    kv = lambda t: marginal_var(S, t)
    score = lambda x, t: mixture_score(x, t, [0.5, 0.5], [-2.0, 2.0], [0.1, 0.1], kv)
    n = 4000
    a = sample(score, (n,), SamplerConfig(steps=1000), RngStream(42, 0))
    b = sample(score, (n,), SamplerConfig(steps=2000), RngStream(42, 1))
    (wa, pa, na), (wb, pb, nb) = _mixture_stats(a), _mixture_stats(b)
    # Monte-Carlo standard errors of the two estimates combined, 3 sigma
    se_w = math.sqrt(2 * 0.25 / n)
    se_m = math.sqrt(2 * (0.1**2 + 0.01) / (n / 2))
    assert abs(wa - wb) < 3 * se_w
    assert abs(pa - pb) < 3 * se_m and abs(na - nb) < 3 * se_m


@pytest.mark.parametrize("seed", range(3))
def test_gaussian_score_no_nans(seed):
    score = lambda x, t: -x / (1.0 + marginal_var(S, t))
    x = sample(score, (256,), SamplerConfig(steps=500), RngStream(seed, 9))
    assert np.all(np.isfinite(x))


def test_denoise_step_uses_floor_sigma():
    seen = {}

    def score(x, t):
        seen["last"] = t
        return np.ones_like(x) if t == S.t_floor else -x / (1.0 + marginal_var(S, t))

    cfg = SamplerConfig(steps=3)
    rng_a = RngStream(2)
    a = sample(score, (1,), cfg, rng_a)
    assert seen["last"] == S.t_floor
    b = sample(score, (1,), SamplerConfig(steps=3, denoise_final=False), RngStream(2))
    assert math.isclose(a[0] - b[0], sigma(S, S.t_floor) ** 2, rel_tol=1e-6)
