import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from selqr.geometry import geometry_from_matrices
from selqr.pivot import (PivotContext, invert_interval, log_ndtr_diff, pivot_value, pvalue,
                         pvalue_from_pivot, weight_w0)

from .conftest import random_context
from .oracles import w0_quadrature


def _a0(geo, gamma):
    return geo.N @ gamma + geo.T @ geo.V + geo.dbar


@pytest.mark.parametrize("seed", range(25))
def test_w0_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    ctx = random_context(rng)
    geo = ctx.geometry
    a0 = _a0(geo, ctx.gamma_scaled)
    for x in ctx.x_obs + np.array([-2.0, 0.0, 1.5]):
        ref = w0_quadrature(geo.Q, geo.M * x + a0, geo.Omega, geo.I1, geo.I2)
        assert abs(math.expm1(float(weight_w0(x, ctx, log=True)) - ref)) < 1e-6


def test_log_ndtr_diff_deep_tails():
    assert float(log_ndtr_diff(-math.inf, math.inf)) == 0.0
    la, lb = stats.norm.logsf(40.0), stats.norm.logsf(41.0)
    ref = la + math.log1p(-math.exp(lb - la))
    assert float(log_ndtr_diff(40.0, 41.0)) == pytest.approx(ref, rel=1e-10)
    assert float(log_ndtr_diff(-41.0, -40.0)) == pytest.approx(ref, rel=1e-10)
    v = log_ndtr_diff(np.array([-1.0, 30.0]), np.array([1.0, 31.0]))
    assert v[0] == pytest.approx(math.log(stats.norm.cdf(1) - stats.norm.cdf(-1)), rel=1e-13)


def _flat_context(sigma_sq=1.0, n=100, x_obs=0.7):
    """q = 1 with M parallel to T and no sign constraint: W0 is constant."""
    t = np.array([1.0, -0.5, 2.0])
    geo = geometry_from_matrices(0.8 * t, np.zeros((3, 2)), t[:, None], np.eye(3),
                                 np.array([1.0]), np.zeros(3), np.array([False]))
    return PivotContext(geo, x_obs, sigma_sq, n, np.zeros(2))


def test_constant_weight_gives_gaussian_pivot():
    ctx = _flat_context(sigma_sq=2.0)
    for b in (-0.2, 0.0, 0.05, 0.3):
        expected = stats.norm.cdf((ctx.x_obs - 10 * b) / math.sqrt(2.0))
        assert pivot_value(b, ctx) == pytest.approx(expected, abs=1e-10)


def test_constant_weight_gives_wald_interval():
    ctx = _flat_context(sigma_sq=1.0, n=100, x_obs=0.0)
    res = invert_interval(0.1, ctx)
    assert res.ucb == pytest.approx(0.16449, abs=1e-5)
    assert res.lcb == pytest.approx(-0.16449, abs=1e-5)
    assert not res.unbounded


@pytest.mark.parametrize("piv,p", [(0.975, 0.05), (0.02, 0.04), (0.5, 1.0)])
def test_pvalue_arithmetic(piv, p):
    assert pvalue_from_pivot(piv) == pytest.approx(p, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_pivot_against_outer_quadrature(seed):
    rng = np.random.default_rng(100 + seed)
    ctx = random_context(rng)
    mu = ctx.x_obs + rng.normal(0, ctx.sigma)
    b = mu / math.sqrt(ctx.n)
    m = ctx.mode(mu)
    c = float(ctx.log_density(m, mu))
    f = lambda x: math.exp(float(ctx.log_density(x, mu)) - c)
    w = 40 * ctx.sigma
    lo, _ = integrate.quad(f, m - w, ctx.x_obs, points=None, limit=500, epsabs=0, epsrel=1e-12) \
        if ctx.x_obs > m - w else (0.0, 0)
    hi, _ = integrate.quad(f, ctx.x_obs, m + w, limit=500, epsabs=0, epsrel=1e-12) \
        if ctx.x_obs < m + w else (0.0, 0)
    assert pivot_value(b, ctx) == pytest.approx(lo / (lo + hi), abs=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_pivot_is_monotone_in_b(seed):
    rng = np.random.default_rng(200 + seed)
    ctx = random_context(rng)
    grid = (ctx.x_obs + np.linspace(-6, 6, 60) * ctx.sigma) / math.sqrt(ctx.n)
    vals = np.array([pivot_value(b, ctx) for b in grid])
    assert np.all(np.diff(vals) <= 1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_translation_equivariance(seed):
    rng = np.random.default_rng(300 + seed)
    ctx = random_context(rng)
    delta = float(rng.normal(0, 2))
    moved = ctx.shifted(delta)
    for b in (ctx.x_obs / 10 - 0.1, ctx.x_obs / 10, ctx.x_obs / 10 + 0.2):
        assert pivot_value(b + delta / 10, moved) == pytest.approx(pivot_value(b, ctx), abs=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_log_and_linear_space_agree(seed):
    rng = np.random.default_rng(400 + seed)
    ctx = random_context(rng)
    for k in (-1.0, 0.0, 1.0):
        b = (ctx.x_obs + k * ctx.sigma) / 10
        assert pivot_value(b, ctx, log_space=False) == pytest.approx(pivot_value(b, ctx), abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_coefficient_route_matches_direct(seed):
    rng = np.random.default_rng(500 + seed)
    direct = random_context(rng)
    fast = PivotContext(direct.geometry, direct.x_obs, direct.sigma_sq, direct.n,
                        direct.gamma_scaled, route="coefficients")
    xs = direct.x_obs + np.linspace(-3, 3, 7) * direct.sigma
    mu = direct.x_obs + 0.5
    d = fast.log_density(xs, mu) - direct.log_density(xs, mu)
    assert np.ptp(d) < 1e-6
    for b in (direct.x_obs / 10 - 0.1, direct.x_obs / 10 + 0.1):
        assert pivot_value(b, fast) == pytest.approx(pivot_value(b, direct), abs=1e-8)


def test_intervals_are_nested_and_hit_levels():
    rng = np.random.default_rng(7)
    for _ in range(50):
        ctx = random_context(rng)
        wide = invert_interval(0.05, ctx)
        narrow = invert_interval(0.2, ctx)
        assert wide.lcb <= narrow.lcb and narrow.ucb <= wide.ucb
        for res, a in ((wide, 0.05), (narrow, 0.2)):
            if math.isfinite(res.lcb):
                assert abs(res.pivot_at_lcb - (1 - a / 2)) < 1e-4
            if math.isfinite(res.ucb):
                assert abs(res.pivot_at_ucb - a / 2) < 1e-4


def test_pvalue_is_consistent_with_interval():
    ctx = random_context(np.random.default_rng(3))
    res = invert_interval(0.1, ctx)
    inside = 0.5 * (res.lcb + res.ucb)
    assert pvalue(inside, ctx) > 0.1
    assert pvalue(res.ucb + 5 * ctx.sigma / 10, ctx) < 0.1


def test_invalid_alpha():
    with pytest.raises(ValueError):
        invert_interval(1.5, _flat_context())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_pivot_in_unit_interval(seed, k):
    ctx = random_context(np.random.default_rng(seed))
    v = pivot_value((ctx.x_obs + k * ctx.sigma) / 10, ctx)
    assert 0.0 <= v <= 1.0
