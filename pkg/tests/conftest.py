import math

import numpy as np
import pytest

from selqr.kernels import KernelSpec, selection_bandwidth
from selqr.moments import auxiliary_statistic, estimate_moments
from selqr.solver import solve_randomized_penalized, solve_refit


def fitted_instance(seed, n=300, p=12, tau=0.7, c=1.0, h_infer=None, family="gaussian"):
    """A randomized selection plus refit and moment estimates on AR-free data."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = np.zeros(p)
    beta[:4] = c
    Y = 0.2 + X @ beta + 2.0 * rng.standard_normal(n)
    X = np.column_stack([np.ones(n), X])
    pen = np.ones(p + 1)
    pen[0] = 0.0
    h = selection_bandwidth(n, p, tau)
    spec_sel = KernelSpec(family, h)
    spec_inf = spec_sel if h_infer is None else KernelSpec(family, h_infer)
    lam = 0.6 * math.sqrt(math.log(p))
    omega = rng.standard_normal(p + 1) / math.sqrt(n)
    sol = solve_randomized_penalized(X, Y, tau, spec_sel, lam, omega, pen)
    E = sol.active_set
    ref = solve_refit(X[:, E], Y, tau, spec_inf)
    mom = estimate_moments(X, Y, ref.beta_E, E, tau, spec_sel, spec_inf)
    return dict(X=X, Y=Y, sol=sol, E=E, ref=ref, mom=mom, spec_sel=spec_sel,
                spec_inf=spec_inf, tau=tau, n=n, aux=lambda j, variant=None: auxiliary_statistic(
                    j, X, Y, ref.beta_E, mom, tau, spec_sel, variant))


@pytest.fixture(scope="session")
def instance():
    return fitted_instance(11)


def random_geometry(rng, p=None, q=None):
    """Event geometry from random but well-posed matrices, p <= 12."""
    from selqr.geometry import geometry_from_matrices
    p = int(rng.integers(2, 13)) if p is None else p
    q = int(rng.integers(1, min(p, 6) + 1)) if q is None else q
    T = rng.standard_normal((p, q)) + np.vstack([2.0 * np.eye(q), np.zeros((p - q, q))])
    A = rng.standard_normal((p, p)) * 0.3
    Omega = A @ A.T + np.eye(p) * rng.uniform(0.5, 2.0)
    M = rng.standard_normal(p)
    N = rng.standard_normal((p, p - 1)) * 0.5
    gamma = rng.standard_normal(p - 1)
    o = rng.uniform(0.1, 3.0, q)
    dbar = rng.standard_normal(p)
    constrained = rng.random(q) < 0.9
    geo = geometry_from_matrices(M, N, T, Omega, o, dbar, constrained, gamma_scaled=gamma)
    return geo, gamma


def random_context(rng, route="direct", n=100, **kw):
    from selqr.pivot import PivotContext
    geo, gamma = random_geometry(rng, **kw)
    sigma_sq = float(rng.uniform(0.5, 4.0))
    x_obs = float(rng.normal(0.0, 3.0))
    return PivotContext(geo, x_obs, sigma_sq, n, gamma, route=route)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> (passed, detail); printed at the end of the run."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
