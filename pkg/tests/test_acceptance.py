"""The ten acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line that is printed in the terminal summary.
The replication suite behind criteria 6-9 is the slow part (tens of minutes
on one core); set SELQR_WORKERS to spread it over processes.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from selqr.cli import main
from selqr.geometry import event_matrices, geometry_from_matrices, truncation_interval
from selqr.kernels import (KernelSpec, default_lambda, selection_bandwidth, smoothed_gradient,
                           smoothed_hessian, smoothed_loss)
from selqr.moments import MomentEstimates
from selqr.pivot import PivotContext, log_density_closed_form, pivot_value
from selqr.simulation import SuiteConfig, default_workers, run_replications
from selqr.solver import UnboundedObjectiveError, kkt_check, solve_randomized_penalized

from .conftest import random_context
from .oracles import (LeastSquaresSetting, central_gradient, central_jacobian,
                      randomized_objective_bounded, truncation_scan, w0_quadrature)


def _record(log, k, ok, detail):
    log[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# 1 -------------------------------------------------------------------------------

def test_criterion_01_tuning_formulas(acceptance_log):
    vals = [(default_lambda(0.6, 800, 200), 0.049, 0.001),
            (selection_bandwidth(800, 200, 0.7), 0.131, 0.001),
            (default_lambda(0.4, 500, 83), 0.0377, 0.0005),
            (selection_bandwidth(500, 83, 0.1), 0.092, 0.0005)]
    ok = all(abs(v - ref) <= tol for v, ref, tol in vals)
    _record(acceptance_log, 1, ok, " ".join(f"{v:.4f}/{ref}" for v, ref, _ in vals))


# 2 -------------------------------------------------------------------------------

def _ls_moments(ls):
    G = ls.X.T @ ls.X / ls.n
    return MomentEstimates(E=ls.E, J=G, J_tilde=G, H=ls.sigma2 * G, H_tilde=ls.sigma2 * G,
                           K_cross=ls.sigma2 * G, Sigma_EE=ls.Sigma, same_bandwidth=True)


def test_criterion_02_gaussian_pivot_is_uniform(acceptance_log):
    t0 = time.time()
    rng = np.random.default_rng(20240)
    n, p = 100, 6
    X = rng.standard_normal((n, p))
    beta0 = np.array([0.15, -0.1, 0.05, 0.0, 0.0, 0.0])
    E, signs = np.array([0, 1]), np.array([1.0, -1.0])
    ls = LeastSquaresSetting(X, beta0, 1.0, E, signs, 2.0, np.eye(p))
    k = 0
    M, N, T, perm = event_matrices(int(E[k]), _ls_moments(ls), signs)
    pivots, draws = [], 0
    while len(pivots) < 2000 and draws < 200_000:
        draws += 1
        x, g, om, _, _ = ls.draw(rng, k)
        o, Z = ls.solve_event(x, g, om[perm], k)
        if not (np.all(o > 0) and np.all(np.abs(Z) < 1)):
            continue
        D = np.concatenate([ls.lam * signs, ls.lam * Z])
        geo = geometry_from_matrices(M, N, T, np.eye(p), o, D, gamma_scaled=g, perm=perm)
        ctx = PivotContext(geo, x, float(ls.Sigma[k, k]), n, g)
        pivots.append(pivot_value(float(ls.target[k]), ctx))
    ks = stats.kstest(pivots, "uniform")
    elapsed = time.time() - t0
    ok = len(pivots) >= 2000 and ks.statistic < 0.05 and ks.pvalue > 0.01 and elapsed <= 300
    _record(acceptance_log, 2, ok,
            f"accepted={len(pivots)}/{draws} KS={ks.statistic:.4f} p={ks.pvalue:.3f} "
            f"time={elapsed:.0f}s")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_w0_closed_form_and_fast_path(acceptance_log):
    t0 = time.time()
    rng = np.random.default_rng(303)
    worst_w0 = worst_fast_direct = worst_fast_quad = 0.0
    for _ in range(100):
        ctx = random_context(rng)
        geo = ctx.geometry
        a0 = geo.N @ ctx.gamma_scaled + geo.T @ geo.V + geo.dbar
        fast = PivotContext(geo, ctx.x_obs, ctx.sigma_sq, ctx.n, ctx.gamma_scaled,
                            route="coefficients")
        mu = ctx.x_obs + rng.normal(0, ctx.sigma)
        xs = ctx.x_obs + np.array([-1.5, -0.5, 0.0, 0.7, 1.6]) * ctx.sigma
        quad = np.array([w0_quadrature(geo.Q, geo.M * x + a0, geo.Omega, geo.I1, geo.I2)
                         for x in xs])
        closed = ctx.log_w0(xs)
        worst_w0 = max(worst_w0, float(np.max(np.abs(np.expm1(closed - quad)))))
        # densities are compared after normalizing at the first node
        ref_q = stats.norm.logpdf(xs, mu, ctx.sigma) + quad
        ref_d = ctx.log_density(xs, mu)
        f = log_density_closed_form(xs, mu, fast)
        norm = lambda v: v - v[0]
        worst_fast_direct = max(worst_fast_direct,
                                float(np.max(np.abs(np.expm1(norm(f) - norm(ref_d))))))
        worst_fast_quad = max(worst_fast_quad,
                              float(np.max(np.abs(np.expm1(norm(f) - norm(ref_q))))))
    elapsed = time.time() - t0
    ok = max(worst_w0, worst_fast_direct, worst_fast_quad) < 1e-6 and elapsed <= 60
    _record(acceptance_log, 3, ok,
            f"W0 vs quad {worst_w0:.1e}, fast vs closed {worst_fast_direct:.1e}, "
            f"fast vs quad {worst_fast_quad:.1e}, time={elapsed:.0f}s")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_truncation_interval(acceptance_log):
    t0 = time.time()
    rng = np.random.default_rng(404)
    worst, n_inf, bad = 0.0, 0, 0
    for _ in range(200):
        q = int(rng.integers(1, 7))
        A = rng.standard_normal((q, q))
        Psi = A @ A.T + 0.5 * np.eye(q)
        lam = rng.standard_normal(q)
        if rng.random() < 0.25:
            lam = np.linalg.solve(Psi, np.abs(rng.standard_normal(q)) * rng.choice([-1, 1]))
        pl = Psi @ lam
        o = rng.uniform(0.05, 3.0, q)
        U = lam @ o
        V = o - pl * U / (lam @ pl)
        con = rng.random(q) < 0.85
        I1, I2 = truncation_interval(Psi, lam, V, con)
        lo, hi = truncation_scan(Psi, lam, V, con, center=U, half_width=1e4)
        for got, ref in ((I1, lo), (I2, hi)):
            if math.isinf(ref) or math.isinf(got):
                n_inf += math.isinf(ref)
                bad += got != ref
            else:
                worst = max(worst, abs(got - ref))
    elapsed = time.time() - t0
    ok = bad == 0 and worst <= 1e-5 + 1e-9 and n_inf > 0 and elapsed <= 60
    _record(acceptance_log, 4, ok, f"max |endpoint - scan| = {worst:.1e}, infinite endpoints "
                                   f"{n_inf}, mismatches {bad}, time={elapsed:.0f}s")


# 5 -------------------------------------------------------------------------------

FAMILIES = ["gaussian", "logistic", "uniform", "epanechnikov"]


def test_criterion_05_solver_and_derivatives(acceptance_log):
    rng = np.random.default_rng(505)
    worst_kkt, n_conv, n_unbounded = 0.0, 0, 0
    for i in range(40):
        fam = FAMILIES[i % 4]
        n, p = 120, 10
        X = rng.standard_normal((n, p))
        Y = X[:, :3].sum(axis=1) + rng.standard_normal(n)
        omega = rng.standard_normal(p) / math.sqrt(n)
        spec = KernelSpec(fam, float(rng.uniform(0.2, 1.0)))
        lam = float(rng.uniform(0.8, 3.0))
        tau = float(rng.uniform(0.2, 0.8))
        if not randomized_objective_bounded(X, math.sqrt(n) * omega, lam, tau):
            n_unbounded += 1
            with pytest.raises(UnboundedObjectiveError):
                solve_randomized_penalized(X, Y, tau, spec, lam, omega)
            continue
        sol = solve_randomized_penalized(X, Y, tau, spec, lam, omega)
        if sol.converged:
            n_conv += 1
            worst_kkt = max(worst_kkt, kkt_check(sol, X, Y, tau, spec))
    worst_g = worst_h = 0.0
    for i in range(100):
        fam = FAMILIES[i % 4]
        n, p = 50, 5
        X = rng.standard_normal((n, p))
        b = rng.standard_normal(p) * 0.5
        Y = X @ b + rng.standard_normal(n)
        b = b + 0.3 * rng.standard_normal(p)
        spec = KernelSpec(fam, float(rng.uniform(0.5, 1.5)))
        tau = float(rng.uniform(0.1, 0.9))
        g = smoothed_gradient(X, b, Y, tau, spec)
        H = smoothed_hessian(X, b, Y, tau, spec)
        fg = central_gradient(lambda v: smoothed_loss(X, v, Y, tau, spec), b, eps=1e-4)
        fh = central_jacobian(lambda v: smoothed_gradient(X, v, Y, tau, spec), b, eps=1e-6)
        worst_g = max(worst_g, float(np.max(np.abs(g - fg)) / np.max(np.abs(fg))))
        worst_h = max(worst_h, float(np.max(np.abs(H - fh)) / np.max(np.abs(fh))))
    ok = n_conv > 0 and worst_kkt < 1e-6 and worst_g < 1e-6 and worst_h < 1e-5
    _record(acceptance_log, 5, ok,
            f"KKT max {worst_kkt:.1e} over {n_conv} converged runs ({n_unbounded} unbounded "
            f"detected); FD grad {worst_g:.1e}, Hessian {worst_h:.1e} over 100 instances")


# 6-9 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def suite_result(tmp_path_factory):
    suite = SuiteConfig(models=(1, 2, 3), signals=(0.1, 0.5, 1.0), reps=200, n=400, p=50,
                        tau=0.7, audit_grid=200)
    t0 = time.time()
    res = run_replications(suite, workers=default_workers())
    res.elapsed = time.time() - t0
    out = tmp_path_factory.mktemp("suite")
    res.reps.to_csv(out / "replications.csv", index=False)
    res.coords.to_csv(out / "coordinates.csv", index=False)
    res.summary.to_csv(out / "summary.csv", index=False)
    print(res.summary.to_string())
    return res


def _cells(res, method):
    s = res.summary
    return s[s.method == method].set_index(["model", "signal"])


@pytest.mark.slow
def test_criterion_06_coverage(acceptance_log, suite_result):
    prop = _cells(suite_result, "Proposed")
    cov = prop.coverage
    ok = len(cov) == 9 and bool(((cov >= 0.85) & (cov <= 0.95)).all())
    detail = " ".join(f"M{m}/{s}={v:.3f}" for (m, s), v in cov.items())
    failed = int(suite_result.reps.status.ne("ok").sum())
    _record(acceptance_log, 6, ok, f"{detail}; failed reps {failed}; "
                                   f"time={suite_result.elapsed / 60:.1f}min")


@pytest.mark.slow
def test_criterion_07_baselines(acceptance_log, suite_result):
    prop = _cells(suite_result, "Proposed")
    naive = _cells(suite_result, "Naive")
    cov_p, cov_n = prop.coverage[(3, "Low")], naive.coverage[(3, "Low")]
    ratio = prop.length_ratio
    ok = cov_n < cov_p and len(ratio) == 9 and bool((ratio < 1.0).all())
    _record(acceptance_log, 7, ok,
            f"M3/Low naive {cov_n:.3f} vs proposed {cov_p:.3f}; length ratio max "
            f"{ratio.max():.3f} (" + " ".join(f"M{m}/{s}={v:.2f}" for (m, s), v in ratio.items())
            + ")")


@pytest.mark.slow
def test_criterion_08_f1_direction(acceptance_log, suite_result):
    prop = _cells(suite_result, "Proposed")
    cells = prop[prop.index.get_level_values("signal").isin(["Medium", "High"])]
    diff = cells.f1_after - cells.f1_before
    ok = len(diff) == 6 and bool((diff > 0).all())
    _record(acceptance_log, 8, ok, " ".join(
        f"M{m}/{s}: {a:.3f}>{b:.3f}" for (m, s), a, b in
        zip(cells.index, cells.f1_after, cells.f1_before)))


@pytest.mark.slow
def test_criterion_09_pivot_audit(acceptance_log, suite_result):
    c = suite_result.coords
    c = c[(c.method == "Proposed") & c.audit_max_increase.notna()]
    worst_inc = float(c.audit_max_increase.max())
    e_lo = float(c.audit_lcb_err.max(skipna=True))
    e_hi = float(c.audit_ucb_err.max(skipna=True))
    ok = len(c) > 0 and worst_inc <= 1e-12 and e_lo <= 1e-4 and e_hi <= 1e-4
    _record(acceptance_log, 9, ok,
            f"{len(c)} intervals; max pivot increase {worst_inc:.1e}; "
            f"|pivot(LCB)-(1-a/2)| {e_lo:.1e}; |pivot(UCB)-a/2| {e_hi:.1e}")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_determinism(acceptance_log, tmp_path):
    same = []
    sim = ["simulate", "--model", "1", "--n", "400", "--p", "50", "--c", "1", "--seed", "7",
           "--save-data"]
    for d in ("s1", "s2"):
        assert main(sim + ["-o", str(tmp_path / d)]) == 0
    for f in ("simulate_coords.csv", "simulate.json", "simulate_data.csv"):
        same.append((tmp_path / "s1" / f).read_bytes() == (tmp_path / "s2" / f).read_bytes())
    rep = ["replicate", "--models", "1", "3", "--signals", "0.5", "--reps", "3", "--n", "150",
           "--p", "12", "--oracle-factor", "10", "--seed", "11"]
    for d, w in (("r1", "1"), ("r2", "2"), ("r3", "3")):
        assert main(rep + ["--workers", w, "-o", str(tmp_path / d)]) == 0
    for f in ("replications.csv", "coordinates.csv", "summary.json"):
        ref = (tmp_path / "r1" / f).read_bytes()
        same += [(tmp_path / d / f).read_bytes() == ref for d in ("r2", "r3")]
    ok = all(same)
    _record(acceptance_log, 10, ok, f"{sum(same)}/{len(same)} artifact pairs byte-identical "
                                    "(simulate x2, replicate at 1/2/3 workers)")
