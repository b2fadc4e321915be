import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selqr import kernels as K
from selqr.kernels import KernelFamily, KernelSpec

from .oracles import (central_gradient, central_jacobian, check, kernel_cdf_quad,
                      kernel_density, normal_cdf_erf, smoothed_check_quad)

FAMILIES = [f.value for f in KernelFamily]


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("v", [-2.5, -1.0, -0.3, 0.0, 0.7, 1.0, 3.0])
def test_density_and_cdf_match_definitions(family, v):
    assert K.density(v, family) == pytest.approx(kernel_density(v, family), abs=1e-14)
    assert K.cdf(v, family) == pytest.approx(kernel_cdf_quad(v, family), abs=1e-11)


def test_frozen_gaussian_values():
    assert float(K.density(0.0)) == pytest.approx(0.39894, abs=1e-5)
    assert float(K.cdf(1.0)) == pytest.approx(0.84134, abs=1e-5)
    assert float(K.cdf(1.0)) == pytest.approx(normal_cdf_erf(1.0), abs=1e-15)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("r", [-3.0, -0.4, 0.0, 0.05, 0.9, 2.2])
@pytest.mark.parametrize("tau", [0.1, 0.5, 0.7])
def test_smoothed_check_against_convolution(family, r, tau):
    spec = KernelSpec(family, 0.6)
    got = float(K.smoothed_check(r, tau, spec))
    assert got == pytest.approx(smoothed_check_quad(r, tau, 0.6, family), rel=1e-9, abs=1e-11)


@pytest.mark.parametrize("family", FAMILIES)
def test_integrated_cdf_derivative_is_cdf(family):
    a = np.linspace(-2.5, 2.5, 41) + 0.013
    eps = 1e-6
    fd = (K.integrated_cdf(a + eps, family) - K.integrated_cdf(a - eps, family)) / (2 * eps)
    np.testing.assert_allclose(fd, K.cdf(a, family), atol=1e-8)


@pytest.mark.parametrize("family", ["gaussian", "logistic"])
def test_smoothing_limit_recovers_check_loss(family):
    r = np.array([-2.0, -0.5, 0.3, 1.7])
    got = K.smoothed_check(r, 0.3, KernelSpec(family, 1e-6))
    np.testing.assert_allclose(got, check(r, 0.3), atol=1e-5)


def _instance(seed, n=40, p=5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = rng.standard_normal(p) * 0.5
    Y = X @ beta + rng.standard_normal(n)
    b = beta + 0.3 * rng.standard_normal(p)
    return X, b, Y


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_and_hessian_by_finite_differences(family, seed):
    X, b, Y = _instance(seed)
    # smooth kernels everywhere; compact ones are only piecewise smooth in the
    # Hessian, so keep h wide relative to the FD step
    spec = KernelSpec(family, 0.8)
    g = K.smoothed_gradient(X, b, Y, 0.7, spec)
    H = K.smoothed_hessian(X, b, Y, 0.7, spec)
    fd_g = central_gradient(lambda v: K.smoothed_loss(X, v, Y, 0.7, spec), b, eps=1e-4)
    fd_H = central_jacobian(lambda v: K.smoothed_gradient(X, v, Y, 0.7, spec), b, eps=1e-6)
    assert _rel(g, fd_g) < 1e-6
    assert _rel(H, fd_H) < 1e-5


def test_uniform_hessian_vanishes_far_from_data():
    X, b, Y = _instance(0)
    H = K.smoothed_hessian(X, b + 100.0, Y, 0.5, KernelSpec("uniform", 0.1))
    assert np.all(H == 0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FAMILIES), st.floats(0.05, 0.95), st.floats(0.05, 3.0),
       st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_smoothed_check_is_convex(family, tau, h, r1, r2, t):
    spec = KernelSpec(family, h)
    f = lambda r: float(K.smoothed_check(r, tau, spec))
    mid = t * r1 + (1 - t) * r2
    assert f(mid) <= t * f(r1) + (1 - t) * f(r2) + 1e-10


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FAMILIES), st.floats(-20, 20))
def test_cdf_bounds_and_symmetry(family, v):
    c = float(K.cdf(v, family))
    assert 0.0 <= c <= 1.0
    assert c + float(K.cdf(-v, family)) == pytest.approx(1.0, abs=1e-12)


def test_dimension_mismatch_message():
    with pytest.raises(ValueError, match="dimension mismatch"):
        K.smoothed_loss(np.ones((3, 2)), np.ones(3), np.ones(3), 0.5, KernelSpec())


@pytest.mark.parametrize("n,p,tau,c,lam,h", [
    (800, 200, 0.7, 0.6, 0.049, 0.131),
    (500, 83, 0.1, 0.4, 0.0377, 0.092),
])
def test_tuning_formulas(n, p, tau, c, lam, h):
    tol = 0.001 if n == 800 else 0.0005
    assert K.default_lambda(c, n, p) == pytest.approx(lam, abs=tol)
    assert K.selection_bandwidth(n, p, tau) == pytest.approx(h, abs=tol)


def test_bandwidth_floor_and_inference_bandwidth():
    assert K.selection_bandwidth(10**9, 2, 0.5) == 0.05
    assert K.inference_bandwidth(400, 5) == pytest.approx(((5 + math.log(400)) / 400) ** 0.4)
    assert K.default_bandwidths(400, 50, 0.7)[0] == K.default_bandwidths(400, 50, 0.7)[1]


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf")])
def test_bandwidth_validation(bad):
    with pytest.raises(ValueError):
        KernelSpec("gaussian", bad)
