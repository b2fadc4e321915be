"""Selective pivot for one selected coefficient.

With ``x = sqrt(n) beta_j`` and ``a(x) = M x + N g + P`` (``g`` the scaled
auxiliary statistic) the selection weight is

    W0(x) = int_{I1}^{I2} phi(Q t + a(x); 0, Omega) dt
          = c * exp(-a'Theta a / 2) * [Phi(r(I2 + L)) - Phi(r(I1 + L))],

where s = Q'Omega^{-1}Q, r = sqrt(s), L = Q'Omega^{-1}a / s and
Theta = Omega^{-1} - Omega^{-1}QQ'Omega^{-1}/s (positive semidefinite).  The
pivot at b is the CDF at the observed x of the density proportional to
phi(x; sqrt(n) b, sigma_j^2) W0(x).  That density is log-concave with
curvature at least 1/sigma_j^2, which is what the quadrature relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .geometry import EventGeometry

LOG_2PI = math.log(2.0 * math.pi)
TOL_INVERT = 1e-4
_GL64 = np.polynomial.legendre.leggauss(64)
_GL32 = np.polynomial.legendre.leggauss(32)
# a segment whose endpoint sits this far (in log units) below the peak ends
# the sweep; concavity bounds the neglected tail by e^-60 relative
_LOG_DROP = 60.0
_DYADIC = 2.0 ** np.arange(-3, 64)


class PivotUnderflowError(FloatingPointError):
    pass


def log_ndtr_diff(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo <= hi, accurate in both tails."""
    if isinstance(lo, float) and isinstance(hi, float):
        if lo > 0:
            a, b = special.log_ndtr(-lo), special.log_ndtr(-hi)
        else:
            a, b = special.log_ndtr(hi), special.log_ndtr(lo)
        d = b - a
        if d == 0:
            return -math.inf
        return a + (math.log(-math.expm1(d)) if d > -math.log(2.0) else math.log1p(-math.exp(d)))
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    upper = lo > 0
    # upper tail: Phi(-lo) - Phi(-hi)
    a = special.log_ndtr(np.where(upper, -lo, hi))
    b = special.log_ndtr(np.where(upper, -hi, lo))
    out = a + _log1mexp(b - a)
    return out if out.ndim else float(out)


def _lse(v, axis=None):
    """Plain logsumexp; all -inf gives -inf."""
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out.ravel()[0])


def _log1mexp(d):
    """log(1 - exp(d)) for d <= 0."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(d > -math.log(2.0), np.log(-np.expm1(d)), np.log1p(-np.exp(d)))


def _log_phi(u):
    return -0.5 * u * u - 0.5 * LOG_2PI


@dataclass
class PivotContext:
    """Frozen inputs of the pivot for one coordinate.

    ``x_obs`` is sqrt(n) beta_j.  The attributes after ``log_space`` are
    derived in ``__post_init__``.
    """
    geometry: EventGeometry
    x_obs: float
    sigma_sq: float
    n: int
    gamma_scaled: np.ndarray | None = None
    log_space: bool = True
    # "direct": phi(x; mu, sigma^2) W0(x); "coefficients": the Gaussian-times-mass
    # form from mass_coefficients (same density up to a constant in x)
    route: str = "direct"
    Theta: np.ndarray = field(init=False, repr=False)
    inner_scale: float = field(init=False)

    def __post_init__(self):
        g = self.geometry
        if self.gamma_scaled is None:
            self.gamma_scaled = g.gamma_scaled
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")
        Oi = g.Omega_inv
        OiQ = Oi @ g.Q
        s = float(g.Q @ OiQ)
        if not s > 0:
            raise ValueError("Q' Omega^{-1} Q must be positive")
        self.inner_scale = s
        self.Theta = Oi - np.outer(OiQ, OiQ) / s
        a0 = g.P.copy()
        if g.N.size and self.gamma_scaled is not None and len(self.gamma_scaled):
            a0 = a0 + g.N @ self.gamma_scaled
        self._a0 = a0
        TM = self.Theta @ g.M
        self._A = float(g.M @ TM)
        self._B = float(a0 @ TM)
        self._C = float(a0 @ self.Theta @ a0)
        self._qm = float(OiQ @ g.M)
        self._qa = float(OiQ @ a0)
        self._root_s = math.sqrt(s)
        _, logdet = np.linalg.slogdet(g.Omega)
        p = g.Omega.shape[0]
        self._logc = -0.5 * p * LOG_2PI - 0.5 * logdet + 0.5 * (LOG_2PI - math.log(s))
        self.sigma = math.sqrt(self.sigma_sq)
        if self.route not in ("direct", "coefficients"):
            raise ValueError(f"unknown route {self.route!r}")
        self._coef = mass_coefficients(self) if self.route == "coefficients" else None

    @property
    def I1(self) -> float:
        return self.geometry.I1

    @property
    def I2(self) -> float:
        return self.geometry.I2

    def shifted(self, delta: float) -> "PivotContext":
        """Same context with x_obs moved by delta and W0 translated with it."""
        g = self.geometry
        geo = EventGeometry(**{**g.__dict__, "P": g.P - g.M * delta,
                                "dbar": g.dbar - g.M * delta})
        return PivotContext(geo, self.x_obs + delta, self.sigma_sq, self.n,
                            self.gamma_scaled, self.log_space, self.route)

    # --- weight -----------------------------------------------------------
    def _bracket_args(self, x):
        L = (self._qm * x + self._qa) / self.inner_scale
        rs = self._root_s
        return rs * (self.I1 + L), rs * (self.I2 + L)

    def log_w0(self, x):
        x = np.asarray(x, dtype=float)
        quad = self._A * x * x + 2.0 * self._B * x + self._C
        u1, u2 = self._bracket_args(x)
        return self._logc - 0.5 * quad + log_ndtr_diff(u1, u2)

    def w0_linear(self, x):
        x = np.asarray(x, dtype=float)
        quad = self._A * x * x + 2.0 * self._B * x + self._C
        u1, u2 = self._bracket_args(x)
        return math.exp(self._logc) * np.exp(-0.5 * quad) * (special.ndtr(u2) - special.ndtr(u1))

    def dlog_w0(self, x):
        x = np.asarray(x, dtype=float)
        u1, u2 = self._bracket_args(x)
        ld = log_ndtr_diff(u1, u2)
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp(_log_phi(u2) - ld) - np.exp(_log_phi(u1) - ld)
        ratio = np.nan_to_num(ratio)
        return -(self._A * x + self._B) + self._qm / self._root_s * ratio

    # --- tilted density ---------------------------------------------------
    def log_density(self, x, mu):
        """log phi(x; mu, sigma^2) + log W0(x), unnormalized."""
        if self._coef is not None:
            return log_density_closed_form(x, mu, self, self._coef)
        x = np.asarray(x, dtype=float)
        return -0.5 * (x - mu) ** 2 / self.sigma_sq - 0.5 * math.log(self.sigma_sq) \
            - 0.5 * LOG_2PI + self.log_w0(x)

    def dlog_density(self, x, mu):
        return -(np.asarray(x, dtype=float) - mu) / self.sigma_sq + self.dlog_w0(x)

    def _dlog_scalar(self, x: float, mu: float) -> float:
        L = (self._qm * x + self._qa) / self.inner_scale
        rs = self._root_s
        u1, u2 = rs * (self.I1 + L), rs * (self.I2 + L)
        ld = float(log_ndtr_diff(u1, u2))
        ratio = 0.0
        if math.isfinite(u2):
            ratio += math.exp(-0.5 * u2 * u2 - 0.5 * LOG_2PI - ld)
        if math.isfinite(u1):
            ratio -= math.exp(-0.5 * u1 * u1 - 0.5 * LOG_2PI - ld)
        return -(x - mu) / self.sigma_sq - (self._A * x + self._B) + self._qm / rs * ratio

    def mode(self, mu: float) -> float:
        """Maximizer of the tilted log density (its derivative is strictly
        decreasing, slope at most -1/sigma^2)."""
        f = lambda x: self._dlog_scalar(x, mu)
        step = self.sigma
        lo = hi = mu
        flo = fhi = f(mu)
        if flo == 0:
            return mu
        if flo > 0:
            while fhi > 0:
                lo, hi = hi, hi + step
                fhi = f(hi)
                step *= 2.0
        else:
            while flo < 0:
                hi, lo = lo, lo - step
                flo = f(lo)
                step *= 2.0
        return optimize.brentq(f, lo, hi, xtol=1e-10 * self.sigma, rtol=1e-13)


def weight_w0(x, ctx: PivotContext, log: bool = False):
    """W0 at x (or its log)."""
    if log:
        return ctx.log_w0(x)
    return ctx.w0_linear(x)


def _breakpoints(ctx, mu, a, b, m, hm):
    """Segment endpoints for the log-concave integrand on [a, b]."""
    sig = ctx.sigma
    eps = 1e-6 * sig
    d = ctx.dlog_density(np.array([m - eps, m, m + eps]), mu)
    d2 = (d[2] - d[0]) / (2 * eps)
    scale = sig if not d2 < 0 else min(sig, 1.0 / math.sqrt(-d2))
    if (m == a or m == b) and d[1] != 0:
        scale = min(scale, 1.0 / abs(d[1]))
    scale = max(scale, 1e-12 * max(1.0, abs(m)))
    steps = scale * _DYADIC
    pts = [np.array([m])]
    for direction, end in ((1.0, b), (-1.0, a)):
        cand = m + direction * steps
        inside = cand < end if direction > 0 else cand > end
        cand = cand[inside]
        if cand.size:
            low = np.flatnonzero(ctx.log_density(cand, mu) < hm - _LOG_DROP)
            if low.size:
                pts.append(cand[:low[0] + 1])
                continue
            pts.append(cand)
        if math.isfinite(end):
            pts.append(np.array([end]))
        else:
            pts.append(m + direction * steps[-1:] * 2.0)
    return np.unique(np.concatenate(pts))


def _segment_logmass(ctx, mu, lo, hi, rule, log_space):
    """Per-segment log integrals of the tilted density over [lo_i, hi_i]."""
    nodes, weights = rule
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    xs = mid[:, None] + half[:, None] * nodes[None, :]
    lw = np.log(half)[:, None] + np.log(weights)[None, :]
    if log_space:
        return _lse(lw + ctx.log_density(xs, mu), axis=1)
    dens = np.exp(-0.5 * (xs - mu) ** 2 / ctx.sigma_sq) / math.sqrt(2 * math.pi * ctx.sigma_sq)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(lw) * dens * ctx.w0_linear(xs), axis=1))


def _log_tails(ctx: PivotContext, mu: float, log_space: bool | None = None,
               with_error: bool = False):
    """(log lower mass, log upper mass, error estimate) split at x_obs.

    One breakpoint sweep around the mode serves both tails; x_obs is added as
    a breakpoint.  The error estimate compares 32- and 64-node rules on the
    pivot itself and is only computed on request.
    """
    if log_space is None:
        log_space = ctx.log_space
    m = ctx.mode(mu)
    hm = float(ctx.log_density(m, mu))
    if not np.isfinite(hm):
        raise PivotUnderflowError(f"log density is not finite at the mode (mu={mu:.6g})")
    pts = _breakpoints(ctx, mu, -math.inf, math.inf, m, hm)
    x0 = ctx.x_obs
    pts = np.unique(np.concatenate([pts, [x0]]))
    lo, hi = pts[:-1], pts[1:]
    below = hi <= x0
    out = []
    for rule in ((_GL32, _GL64) if with_error else (_GL32,)):
        seg = _segment_logmass(ctx, mu, lo, hi, rule, log_space)
        lN = _lse(seg[below]) if below.any() else -math.inf
        lU = _lse(seg[~below]) if (~below).any() else -math.inf
        out.append((float(lN), float(lU)))
    lN, lU = out[0]
    if lN == -math.inf and lU == -math.inf:
        raise PivotUnderflowError(
            f"pivot underflow at mu={mu:.6g}: both tails vanish "
            f"(x_obs={x0:.6g}, I=[{ctx.I1:.6g}, {ctx.I2:.6g}])")
    err = 0.0
    if with_error:
        err = abs(float(special.expit(lN - lU)) - float(special.expit(out[1][0] - out[1][1])))
    return lN, lU, err


def pivot_value(b: float, ctx: PivotContext, log_space: bool | None = None) -> float:
    """Selective CDF of sqrt(n) beta_j at its observed value, under beta_j = b."""
    lN, lU, _ = _log_tails(ctx, math.sqrt(ctx.n) * b, log_space)
    return float(special.expit(lN - lU))


def _pivot_pair(mu, ctx, with_error=False):
    """(pivot, 1 - pivot, error) at sqrt(n) b = mu."""
    lN, lU, err = _log_tails(ctx, mu, with_error=with_error)
    return float(special.expit(lN - lU)), float(special.expit(lU - lN)), err


def pvalue(b0: float, ctx: PivotContext) -> float:
    """Two-sided p-value 2 min(pivot, 1 - pivot) for H0: beta_j = b0."""
    lo, up, _ = _pivot_pair(math.sqrt(ctx.n) * b0, ctx)
    return float(min(1.0, 2.0 * min(lo, up)))


def pvalue_from_pivot(piv: float) -> float:
    return float(min(1.0, 2.0 * min(piv, 1.0 - piv)))


@dataclass
class IntervalResult:
    lcb: float
    ucb: float
    alpha: float
    pivot_at_lcb: float
    pivot_at_ucb: float
    quadrature_error_estimate: float
    unbounded: bool = False

    @property
    def length(self) -> float:
        return self.ucb - self.lcb


def _solve_level(ctx, target, start, p_start, direction, tol_invert, max_expand):
    """Find mu with pivot(mu) = target, searching from ``start`` in ``direction``.

    pivot is nonincreasing in mu.  Returns (mu, pivot(mu), err), or an infinite
    endpoint once the bracket outgrows ``max_expand`` sigmas.
    """
    sig = ctx.sigma
    g = lambda mu: _pivot_pair(mu, ctx)[0] - target
    width = 4.0 * sig
    near, g_near = start, p_start - target
    # left searches start where g <= 0, right ones where g >= 0
    while (direction < 0 and g_near > 0) or (direction > 0 and g_near < 0):
        near = near - direction * width
        g_near = g(near)
        width *= 2.0
        if width > max_expand * sig:
            return -direction * math.inf, float("nan"), 0.0
    width = 4.0 * sig
    far = near + direction * width
    g_far = g(far)
    while np.sign(g_far) == np.sign(g_near) and g_far != 0:
        width *= 2.0
        if width > max_expand * sig:
            return direction * math.inf, float("nan"), 0.0
        near, g_near = far, g_far
        far = near + direction * width
        g_far = g(far)
    lo, hi = sorted((near, far))
    root = optimize.brentq(g, lo, hi, xtol=1e-6 * sig, rtol=1e-12, maxiter=200)
    val, _, err = _pivot_pair(root, ctx, with_error=True)
    if abs(val - target) > tol_invert:
        # flat pivot near the root: fall back to plain bisection on the level
        a_, b_ = lo, hi
        ga = g(a_)
        for _ in range(200):
            mid = 0.5 * (a_ + b_)
            gm = g(mid)
            if (gm > 0) == (ga > 0):
                a_, ga = mid, gm
            else:
                b_ = mid
        root = 0.5 * (a_ + b_)
        val, _, err = _pivot_pair(root, ctx, with_error=True)
    return root, val, err


def invert_interval(alpha: float, ctx: PivotContext, tol_invert: float = TOL_INVERT,
                    max_expand: float = 2.0 ** 20) -> IntervalResult:
    """Equal-tailed (1 - alpha) interval {b : alpha/2 <= pivot(b) <= 1 - alpha/2}."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rootn = math.sqrt(ctx.n)
    p_obs = _pivot_pair(ctx.x_obs, ctx)[0]
    mu_lo, p_lo, e_lo = _solve_level(ctx, 1.0 - alpha / 2.0, ctx.x_obs, p_obs, -1.0,
                                     tol_invert, max_expand)
    mu_hi, p_hi, e_hi = _solve_level(ctx, alpha / 2.0, ctx.x_obs, p_obs, 1.0,
                                     tol_invert, max_expand)
    unbounded = not (math.isfinite(mu_lo) and math.isfinite(mu_hi))
    return IntervalResult(lcb=mu_lo / rootn, ucb=mu_hi / rootn, alpha=alpha,
                          pivot_at_lcb=p_lo, pivot_at_ucb=p_hi,
                          quadrature_error_estimate=max(e_lo, e_hi), unbounded=unbounded)


# --- closed-form coefficient route -----------------------------------------

@dataclass
class GaussianMassCoefficients:
    """phi(x; mu, sigma^2) W0(x) is proportional in x to

        phi((x - nu mu - shift) / vartheta)
          * [Phi((I2 - m(x)) / kappa) - Phi((I1 - m(x)) / kappa)],

    with m(x) = -kappa^2 x + delta.
    """
    vartheta_sq: float
    nu: float
    shift: float
    kappa_sq: float
    delta: float


def mass_coefficients(ctx: PivotContext) -> GaussianMassCoefficients:
    g = ctx.geometry
    Oi = g.Omega_inv
    base = g.dbar.copy()
    if g.N.size and ctx.gamma_scaled is not None and len(ctx.gamma_scaled):
        base = base + g.N @ ctx.gamma_scaled
    kappa_sq = float(g.LambdaJ @ g.Psi @ g.LambdaJ)
    # T V drops out: Lam'V = 0 makes both Q'Omega^{-1}T V and M'Omega^{-1}T V vanish
    delta = -float(g.LambdaJ @ g.Psi @ g.T.T @ Oi @ base)
    MOM = float(g.M @ Oi @ g.M)
    prec = 1.0 / ctx.sigma_sq + MOM - kappa_sq
    vartheta_sq = 1.0 / prec
    shift = -vartheta_sq * (float(g.M @ Oi @ base) + delta)
    return GaussianMassCoefficients(vartheta_sq=vartheta_sq, nu=vartheta_sq / ctx.sigma_sq,
                                    shift=shift, kappa_sq=kappa_sq, delta=delta)


def log_density_closed_form(x, mu, ctx: PivotContext, coef: GaussianMassCoefficients | None = None):
    """Unnormalized log density from the coefficient route (differs from
    ``ctx.log_density`` by a constant in x)."""
    c = mass_coefficients(ctx) if coef is None else coef
    x = np.asarray(x, dtype=float)
    kappa = math.sqrt(c.kappa_sq)
    m = -c.kappa_sq * x + c.delta
    z = (x - c.nu * mu - c.shift) / math.sqrt(c.vartheta_sq)
    return _log_phi(z) + log_ndtr_diff((ctx.I1 - m) / kappa, (ctx.I2 - m) / kappa)
