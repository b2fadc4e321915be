"""Refitted and randomized l1-penalized smoothed quantile regression.

The penalized problem is

    minimize_b  sqrt(n) Q_h(Xb; Y) + lam * sum_k w_k |b_k| - sqrt(n) omega'b

with penalty weights ``w`` in {0, 1} (0 marks an unpenalized column such as
an intercept).  It is solved by monotone FISTA with backtracking followed by
an active-set Newton polish, which drives the KKT residual to round-off.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import (KernelSpec, curvature_weights, cdf, smoothed_check)

log = logging.getLogger(__name__)

TOL_REFIT = 1e-8
MAX_ITER = 10_000


class SolverError(RuntimeError):
    pass


class UnboundedObjectiveError(SolverError):
    """The randomization term outgrows the loss and penalty along some ray."""


class RankDeficientError(SolverError):
    pass


@dataclass(frozen=True)
class RandomizationSpec:
    """sqrt(n) * omega ~ N(0, covariance)."""
    covariance: np.ndarray
    seed: int = 0

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise ValueError("randomization covariance must be symmetric")
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def isotropic(cls, p: int, delta2: float, seed: int = 0):
        return cls(delta2 * np.eye(p), seed)

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise ValueError("randomization covariance is not positive definite") from exc


def draw_randomization(spec: RandomizationSpec, n: int, rng=None) -> np.ndarray:
    """One draw of omega ~ N(0, covariance / n).

    ``rng`` overrides the spec's seed so callers owning a stream can use it.
    """
    L = spec.cholesky()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(L.shape[0])
    return L @ z / math.sqrt(n)


@dataclass
class RefitSolution:
    beta_E: np.ndarray
    gradient_norm: float
    iterations: int
    converged: bool = True


@dataclass
class PenalizedSolution:
    beta: np.ndarray
    active_set: np.ndarray          # indices with beta != 0, ascending
    signs: np.ndarray               # +-1 on the active set (+1 on unpenalized)
    Z: np.ndarray                   # inactive subgradient, aligned with inactive_set
    omega: np.ndarray
    lam: float
    penalty: np.ndarray             # per-column penalty weights
    converged: bool
    kkt_residual: float
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def inactive_set(self) -> np.ndarray:
        mask = np.ones(self.beta.shape[0], dtype=bool)
        mask[self.active_set] = False
        return np.flatnonzero(mask)

    @property
    def q(self) -> int:
        return int(self.active_set.size)

    def subgradient(self) -> np.ndarray:
        """D = lam * (s_E; Z) in original coordinates (0 on unpenalized columns)."""
        D = np.zeros_like(self.beta)
        E = self.active_set
        D[E] = self.lam * self.penalty[E] * self.signs
        D[self.inactive_set] = self.lam * self.Z
        return D


def _loss_grad(X, b, Y, tau, spec, rootn):
    """sqrt(n) Q(Xb) and its gradient."""
    r = Y - X @ b
    h = spec.bandwidth
    f = rootn * float(np.mean(smoothed_check(r, tau, spec)))
    w = cdf(-r / h, spec.family) - tau
    g = rootn * (X.T @ w) / X.shape[0]
    return f, g


def _hess(X, b, Y, spec, rootn):
    w = curvature_weights(X, b, Y, spec)
    H = (X * w[:, None]).T @ X * (rootn / X.shape[0])
    return 0.5 * (H + H.T)


def solve_refit(X_E, Y, tau, spec: KernelSpec, beta0=None, tol=TOL_REFIT,
                max_iter=200) -> RefitSolution:
    """Unpenalized smoothed quantile regression of Y on the columns of X_E.

    Damped Newton with Armijo backtracking; Levenberg damping kicks in when
    the smoothed Hessian is (near) singular, which happens for compact kernels
    with few residuals inside the bandwidth.
    """
    X_E = np.asarray(X_E, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X_E.ndim != 2 or X_E.shape[0] != Y.shape[0]:
        raise ValueError("dimension mismatch between X_E and Y")
    n, q = X_E.shape
    if q == 0:
        raise ValueError("refit requires at least one column")
    if np.linalg.matrix_rank(X_E) < q:
        raise RankDeficientError(f"selected design of {q} columns is rank deficient")
    if beta0 is None:
        beta0 = np.linalg.lstsq(X_E, Y, rcond=None)[0]
    b = np.array(beta0, dtype=float)
    f, g = _loss_grad(X_E, b, Y, tau, spec, 1.0)
    gnorm = float(np.max(np.abs(g)))
    it = 0
    for it in range(1, max_iter + 1):
        if gnorm <= tol:
            it -= 1
            break
        H = _hess(X_E, b, Y, spec, 1.0)
        mu = 0.0
        scale = max(float(np.trace(H)) / q, 1e-300)
        while True:
            try:
                step = linalg.solve(H + mu * np.eye(q), -g, assume_a="pos")
                if np.all(np.isfinite(step)):
                    break
            except (linalg.LinAlgError, ValueError):
                pass
            mu = max(10.0 * mu, 1e-10 * scale, 1e-12)
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -float(g @ g)
        t = 1.0
        while True:
            b_new = b + t * step
            f_new, g_new = _loss_grad(X_E, b_new, Y, tau, spec, 1.0)
            if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f_new > f + 1e-12 * max(1.0, abs(f)):
            break
        b, f, g = b_new, f_new, g_new
        gnorm = float(np.max(np.abs(g)))
    converged = gnorm <= tol
    if not converged:
        # Newton stalls only at round-off on badly scaled problems
        converged = gnorm <= 1e3 * tol
        if not converged:
            warnings.warn(f"refit did not converge: gradient norm {gnorm:.3g}")
    return RefitSolution(beta_E=b, gradient_norm=gnorm, iterations=it,
                         converged=converged)


def _soft(v, thr):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def _objective(X, b, Y, tau, spec, lam, penalty, omega_s, rootn):
    f, g = _loss_grad(X, b, Y, tau, spec, rootn)
    return f + lam * float(penalty @ np.abs(b)) - float(omega_s @ b), f, g


def _stationarity(b, g_lin, lam, penalty):
    """Max KKT violation given the gradient of the smooth+linear part."""
    viol = np.where(
        b != 0,
        np.abs(g_lin + lam * penalty * np.sign(b)),
        np.maximum(np.abs(g_lin) - lam * penalty, 0.0),
    )
    return float(np.max(viol)) if viol.size else 0.0


def _polish(X, Y, tau, spec, lam, penalty, omega_s, rootn, b, tol):
    """Newton on the current support with fixed signs; None if it fails."""
    E = np.flatnonzero((b != 0) | (penalty == 0))
    if E.size == 0:
        return None
    s = np.sign(b[E])
    s[s == 0] = 1.0
    lin = lam * penalty[E] * s - omega_s[E]
    XE = X[:, E]
    if np.linalg.matrix_rank(XE) < E.size:
        return None
    bE = b[E].copy()

    def fobj(v):
        f, g = _loss_grad(XE, v, Y, tau, spec, rootn)
        return f + lin @ v, g + lin

    F, G = fobj(bE)
    for _ in range(100):
        if np.max(np.abs(G)) <= 1e-3 * tol:
            break
        Hm = _hess(XE, bE, Y, spec, rootn)
        try:
            step = linalg.solve(Hm + 1e-14 * np.trace(Hm) * np.eye(E.size), -G,
                                assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            return None
        slope = float(G @ step)
        if not slope < 0:
            break
        t = 1.0
        while t > 1e-10:
            cand = bE + t * step
            Fc, Gc = fobj(cand)
            if Fc <= F + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        bE, F, G = cand, Fc, Gc
    pen = penalty[E] > 0
    if np.any(np.sign(bE[pen]) != s[pen]) or np.any(bE[pen] == 0):
        return None
    out = np.zeros_like(b)
    out[E] = bE
    return out


def solve_randomized_penalized(X, Y, tau, spec: KernelSpec, lam: float,
                               omega=None, penalty=None, beta0=None,
                               tol=None, max_iter=MAX_ITER) -> PenalizedSolution:
    """Solve the randomized l1-penalized smoothed quantile regression.

    ``lam`` multiplies the l1 norm in the sqrt(n)-scaled objective.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    if Y.shape != (n,):
        raise ValueError("dimension mismatch between X and Y")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    rootn = math.sqrt(n)
    omega = np.zeros(p) if omega is None else np.asarray(omega, dtype=float)
    penalty = np.ones(p) if penalty is None else np.asarray(penalty, dtype=float)
    if omega.shape != (p,) or penalty.shape != (p,):
        raise ValueError("omega and penalty must have length p")
    if lam == 0 and p > n:
        raise RankDeficientError("lam = 0 with p > n has no unique solution")
    omega_s = rootn * omega
    if tol is None:
        tol = 1e-6 * max(1.0, float(np.max(np.abs(omega_s))) if p else 1.0)
    target = 1e-3 * tol

    # Lipschitz bound for the gradient of sqrt(n) Q(Xb)
    smax = np.linalg.norm(X, 2)
    L_bound = rootn * spec.density_sup / spec.bandwidth * smax ** 2 / n
    L = max(L_bound / 64.0, 1e-12)

    b = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    F, f, g = _objective(X, b, Y, tau, spec, lam, penalty, omega_s, rootn)
    history = [F]
    y = b.copy()
    tk = 1.0
    kkt = _stationarity(b, g - omega_s, lam, penalty)
    it = 0
    next_polish = 10
    # the loss grows at most linearly, so runaway iterates mean no minimizer
    col = np.sqrt(np.mean(X * X, axis=0))
    b_cap = 1e6 * (1.0 + float(np.max(np.abs(Y)))) / max(float(np.min(col[col > 0], initial=1.0)),
                                                          1e-300)
    for it in range(1, max_iter + 1):
        if kkt <= target:
            break
        fy, gy = _loss_grad(X, y, Y, tau, spec, rootn)
        gy_lin = gy - omega_s
        while True:
            z = _soft(y - gy_lin / L, lam * penalty / L)
            fz, gz = _loss_grad(X, z, Y, tau, spec, rootn)
            d = z - y
            if fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fy) or L >= 1e3 * L_bound:
                break
            L *= 2.0
        Fz = fz + lam * float(penalty @ np.abs(z)) - float(omega_s @ z)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        if Fz <= F:
            b_new, F_new, g_new = z, Fz, gz
        else:
            b_new, F_new, g_new = b, F, g
        y = b_new + (tk / t_next) * (z - b_new) + ((tk - 1.0) / t_next) * (b_new - b)
        b, F, g = b_new, F_new, g_new
        tk = t_next
        if float(np.max(np.abs(b))) > b_cap:
            raise UnboundedObjectiveError(
                f"objective is unbounded below (|beta| > {b_cap:.3g}); "
                "increase lam or reduce the randomization variance")
        history.append(F)
        kkt = _stationarity(b, g - omega_s, lam, penalty)
        if it >= next_polish:
            next_polish = it + max(10, it // 2)
            cand = _polish(X, Y, tau, spec, lam, penalty, omega_s, rootn, b, tol)
            if cand is not None:
                Fc, fc, gc = _objective(X, cand, Y, tau, spec, lam, penalty, omega_s, rootn)
                kc = _stationarity(cand, gc - omega_s, lam, penalty)
                if kc <= target and Fc <= F + 1e-12 * max(1.0, abs(F)):
                    b, F, g, kkt = cand, Fc, gc, kc
                    history.append(F)
                    break
        # mild step-size recovery keeps the backtracking estimate tight
        L = max(L / 1.1, L_bound / 1e4)

    sol = _package(X, Y, tau, spec, lam, penalty, omega, b, rootn, it, history)
    sol.converged = sol.kkt_residual <= tol
    if not sol.converged:
        warnings.warn(f"penalized solver stopped with KKT residual {sol.kkt_residual:.3g}")
    return sol


def _package(X, Y, tau, spec, lam, penalty, omega, b, rootn, iterations, history):
    bmax = float(np.max(np.abs(b))) if b.size else 0.0
    tol_zero = 1e-8 * bmax
    b = np.where(np.abs(b) <= tol_zero, 0.0, b)
    E = np.flatnonzero(b != 0)
    Ep = np.setdiff1d(np.arange(b.size), E)
    signs = np.sign(b[E])
    signs[penalty[E] == 0] = 1.0
    _, g = _loss_grad(X, b, Y, tau, spec, rootn)
    omega_s = rootn * omega
    if lam > 0:
        Z = (omega_s[Ep] - g[Ep]) / lam
        pe = penalty[Ep]
        # unpenalized inactive columns carry no subgradient
        Z = np.where(pe > 0, Z / np.where(pe > 0, pe, 1.0), 0.0)
    else:
        Z = np.zeros(Ep.size)
    sol = PenalizedSolution(beta=b, active_set=E, signs=signs, Z=Z, omega=omega,
                            lam=lam, penalty=penalty, converged=False,
                            kkt_residual=0.0, iterations=iterations, history=history)
    sol.kkt_residual = _kkt_from_grad(sol, g, omega_s)
    return sol


def _kkt_from_grad(sol: PenalizedSolution, g, omega_s) -> float:
    resid = g + sol.subgradient() - omega_s
    # unpenalized inactive columns still need a zero gradient
    viol = float(np.max(np.abs(resid))) if resid.size else 0.0
    if sol.Z.size:
        viol = max(viol, sol.lam * max(float(np.max(np.abs(sol.Z))) - 1.0, 0.0))
    return viol


def kkt_check(sol: PenalizedSolution, X, Y, tau, spec: KernelSpec) -> float:
    """|| sqrt(n) X'grad Q + lam (s_E; Z) - sqrt(n) omega ||_inf, plus any
    excess of ||Z||_inf over one (scaled by lam)."""
    X = np.asarray(X, dtype=float)
    rootn = math.sqrt(X.shape[0])
    _, g = _loss_grad(X, sol.beta, np.asarray(Y, dtype=float), tau, spec, rootn)
    return _kkt_from_grad(sol, g, rootn * sol.omega)
