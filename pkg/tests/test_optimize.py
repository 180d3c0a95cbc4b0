import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from hqstream.latent import GaussianParams, SourceConfig, StepSchedule, sample_source, trit_schedule, validate_schedule
from hqstream.optimize import (
    LossConfig,
    _line_search,
    _surrogate_bits,
    default_lambdas,
    distortion_term,
    fit_schedule,
    optimize_schedule,
    rate_term,
    total_loss,
)
from hqstream.stream import encode, measure


def gaussian(shape, sigma, seed=0, mu=0.0):
    rng = np.random.default_rng(seed)
    s = np.full(shape, float(sigma))
    m = np.full(shape, float(mu))
    return m + s * rng.standard_normal(shape), GaussianParams(m, s)


def test_default_lambdas():
    lam = default_lambdas(8)
    assert lam[-1] == 0.2
    np.testing.assert_allclose(lam, 0.2 * 2.0 ** (np.arange(1, 9) - 8))
    assert np.all(np.diff(lam) > 0)
    assert LossConfig().lambdas_for(8).tolist() == lam.tolist()
    with pytest.raises(ValueError):
        LossConfig(lambdas=(1.0,)).lambdas_for(2)
    with pytest.raises(ValueError):
        LossConfig(mode="magic")


def test_total_is_weighted_sum():
    y, p = gaussian((1, 20, 20), 2.0)
    s = trit_schedule(3, 1, finest=0.1)
    rep = total_loss(y, p, s, LossConfig(lambdas=(0.0, 0.0, 0.0)))
    assert rep.total == pytest.approx(rep.rate.sum(), rel=1e-15)
    rep = total_loss(y, p, s, LossConfig(lambdas=(0.1, 0.2, 0.4)))
    assert rep.total == pytest.approx(float(np.sum(rep.rate + np.array([0.1, 0.2, 0.4]) * rep.distortion)))
    one = total_loss(y, p, StepSchedule([[0.3]]), LossConfig(lambdas=(0.2,)))
    assert one.total == pytest.approx(one.rate[0] + 0.2 * one.distortion[0])
    assert np.all(rep.rate >= 0) and np.all(rep.distortion >= 0)


def test_rate_vanishes_for_coarse_steps():
    y, p = gaussian((1, 30, 30), 1.0, seed=1)
    for mode in ("exact", "surrogate"):
        r = rate_term(y, p, StepSchedule([[1e7]]), 1, LossConfig(mode=mode, lambdas=(1,)))
        assert r < 1e-6


def test_distortion_limits():
    y, p = gaussian((1, 30, 30), 1.0, seed=2, mu=0.25)
    fine = distortion_term(y, p, StepSchedule([[1e-4]]), 1, LossConfig(lambdas=(1,)))
    assert fine < 1e-8
    none = StepSchedule([[1.0]], gamma=[1e9])
    d = distortion_term(y, p, none, 1, LossConfig(lambdas=(1,)))
    assert d == pytest.approx(np.mean((y - p.mu) ** 2), rel=1e-12)
    assert rate_term(y, p, none, 1, LossConfig(lambdas=(1,))) == 0.0


def test_uniform_source_distortion():
    rng = np.random.default_rng(3)
    y = rng.uniform(-0.5, 0.5, (1, 300, 300))
    p = GaussianParams(np.zeros_like(y), np.ones_like(y))
    d = distortion_term(y, p, StepSchedule([[1.0]]), 1, LossConfig(lambdas=(1,)))
    assert d == pytest.approx(1 / 12, rel=0.01)


def convolved_density(t, s):
    """Gaussian (scale s) convolved with U(-0.5, 0.5), by quadrature."""
    return integrate.quad(lambda u: norm.pdf(t - u, scale=s), -0.5, 0.5, epsabs=1e-14)[0]


def test_surrogate_model_matches_numeric_integration():
    t = np.linspace(-4, 4, 41)
    for s in (0.3, 1.0, 3.0):
        got = _surrogate_bits(t, s)
        want = np.array([-math.log2(convolved_density(x, s)) for x in t])
        np.testing.assert_allclose(got, want, atol=1e-3)


def test_surrogate_rate_matches_differential_entropy():
    # sigma / delta = 1, mu = 0: the expected surrogate rate is the
    # differential entropy of the convolved density
    y, p = gaussian((1, 1000, 1000), 1.0, seed=4)
    r = rate_term(y, p, StepSchedule([[1.0]]), 1, LossConfig(mode="surrogate", lambdas=(1,)))
    h = integrate.quad(
        lambda x: -convolved_density(x, 1.0) * math.log2(convolved_density(x, 1.0)), -12, 12, limit=200
    )[0]
    assert r == pytest.approx(h, abs=5e-3)


@pytest.mark.parametrize("ratio", [0.1, 0.3, 1.0, 2.0])
def test_surrogate_tracks_exact_rate(ratio):
    y, p = gaussian((1, 250, 400), 1.0, seed=5)
    s = trit_schedule(3, 1, finest=ratio)
    e = total_loss(y, p, s, LossConfig(mode="exact")).rate
    u = total_loss(y, p, s, LossConfig(mode="surrogate")).rate
    # only layers whose step lies in the tested band
    band = (s.delta[:, 0] >= 0.1) & (s.delta[:, 0] <= 2.0)
    assert band.any()
    rel = np.abs(u - e)[band] / e[band]
    assert rel.max() <= 0.05


@pytest.mark.xfail(strict=True, reason="uniform-noise model overstates the rate of coarse odd-K quantizers")
@pytest.mark.parametrize("ratio", [5.0, 10.0])
def test_surrogate_tracks_exact_rate_coarse(ratio):
    y, p = gaussian((1, 250, 400), 1.0, seed=5)
    s = StepSchedule([[ratio]])
    e = rate_term(y, p, s, 1, LossConfig(mode="exact", lambdas=(1,)))
    u = rate_term(y, p, s, 1, LossConfig(mode="surrogate", lambdas=(1,)))
    assert abs(u - e) / e <= 0.05


def test_report_matches_measurement():
    y, p = sample_source(SourceConfig(shape=(3, 30, 30), seed=6))
    y = y.astype(np.float32).astype(np.float64)
    s = StepSchedule(
        trit_schedule(4, 3, finest=0.05).delta,
        trit_schedule(4, 3, finest=0.05).delta * 0.9,
        gamma=[2.0, 1.0, 0.5, 1e-6],
    ).as_float32()
    rep = total_loss(y, p, s, LossConfig(lambda_base=0.2))
    rows = measure(encode(y, p, s), y)
    np.testing.assert_allclose(rep.distortion, [r.msqe for r in rows], rtol=1e-9)
    bits = np.array([r.bpp for r in rows])
    assert np.all(bits >= rep.rate)
    assert np.all(bits <= rep.rate * 1.02 + 8 * 8 * np.arange(1, 5) / y.size)


def test_line_search_quadratic():
    f = lambda x: (x - 1.234) ** 2
    x, fx = _line_search(f, 0.0, f(0.0), -3, 3)
    assert x == pytest.approx(1.234, abs=1e-3)
    x, fx = _line_search(f, 1.234, 0.0, -3, 3)
    assert (x, fx) == (1.234, 0.0)


@pytest.fixture(scope="module")
def small_fit():
    cfg = SourceConfig(shape=(2, 16, 16), seed=7)
    return fit_schedule(cfg, 4, LossConfig(lambda_base=20.0), max_sweeps=2)


def test_fit_descends(small_fit):
    h = small_fit.history
    assert all(a >= b for a, b in zip(h, h[1:]))
    assert small_fit.report.total <= small_fit.start_report.total
    assert small_fit.report.total <= small_fit.trit_report.total
    assert small_fit.report.total == pytest.approx(h[-1])
    validate_schedule(small_fit.schedule)
    s = small_fit.schedule
    assert s.as_float32().delta.tobytes() == s.delta.tobytes()
    ratio = s.delta_inv / s.delta
    assert np.all((ratio >= 0.75 - 1e-6) & (ratio <= 1.25 + 1e-6))


def test_fit_is_deterministic(small_fit):
    again = fit_schedule(SourceConfig(shape=(2, 16, 16), seed=7), 4, LossConfig(lambda_base=20.0), max_sweeps=2)
    assert again.schedule.delta.tobytes() == small_fit.schedule.delta.tobytes()
    assert again.schedule.gamma.tobytes() == small_fit.schedule.gamma.tobytes()


def test_fit_not_worse_than_init():
    y, p = gaussian((1, 16, 16), 3.0, seed=8)
    init = StepSchedule([[40.0], [0.01]])
    res = fit_schedule((y, p), 2, LossConfig(lambda_base=50.0), init=init, max_sweeps=1)
    assert res.report.total <= total_loss(y, p, init, LossConfig(lambda_base=50.0)).total
    assert res.report.total <= res.trit_report.total


def test_fit_respects_time_budget():
    res = fit_schedule(SourceConfig(shape=(2, 8, 8)), 3, LossConfig(), max_sweeps=50, time_budget=0.0)
    assert "budget" in res.diagnostic
    validate_schedule(res.schedule)


def test_channel_step_direction_matches_oracle():
    rng = np.random.default_rng(9)
    sig = np.concatenate([np.full((1, 40, 50), 10.0), np.full((1, 40, 50), 1.0)])
    y = rng.standard_normal(sig.shape) * sig
    p = GaussianParams(np.zeros_like(y), sig)
    cfg = LossConfig(lambdas=(0.2,))
    s = optimize_schedule((y, p), 1, cfg, fit_delta_inv=False, fit_gamma=False)
    grid = np.exp(np.linspace(np.log(0.5), np.log(50), 80))
    best = []
    for c in range(2):
        pc = GaussianParams(p.mu[c : c + 1], p.sigma[c : c + 1])
        losses = [total_loss(y[c : c + 1], pc, StepSchedule([[g]]), cfg).total for g in grid]
        best.append(grid[int(np.argmin(losses))])
    oracle = best[1] / best[0]
    fitted = s.delta[0, 1] / s.delta[0, 0]
    assert oracle > 1 and fitted > 1
