"""Convolution-smoothed quantile loss.

For a symmetric kernel ``K`` with CDF ``Kc`` and bandwidth ``h`` the smoothed
check loss of a residual ``r = y - x'b`` is

    l_h(r) = tau * r + h * G(-r / h),    G(a) = int_{-inf}^a Kc(v) dv,

so its derivative in the linear predictor is ``Kc((x'b - y) / h) - tau`` and
the second derivative is ``K_h(x'b - y)``.  Every supported kernel has an
elementary ``G``; quadrature is only used by the tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special


class KernelFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LOGISTIC = "logistic"
    UNIFORM = "uniform"
    EPANECHNIKOV = "epanechnikov"


# sup_v K(v), used for Lipschitz bounds of the smoothed gradient
_DENSITY_SUP = {
    KernelFamily.GAUSSIAN: 1.0 / math.sqrt(2.0 * math.pi),
    KernelFamily.LOGISTIC: 0.25,
    KernelFamily.UNIFORM: 0.5,
    KernelFamily.EPANECHNIKOV: 0.75,
}


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.GAUSSIAN
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    def with_bandwidth(self, h: float) -> "KernelSpec":
        return KernelSpec(self.family, h)

    @property
    def density_sup(self) -> float:
        return _DENSITY_SUP[self.family]


@dataclass(frozen=True)
class QuantileSpec:
    tau: float
    h_select: float
    h_infer: float

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not (self.h_select > 0 and self.h_infer > 0):
            raise ValueError("bandwidths must be positive")


def _as_family(kernel) -> KernelFamily:
    if isinstance(kernel, KernelSpec):
        return kernel.family
    return KernelFamily(kernel)


def density(v, kernel=KernelFamily.GAUSSIAN):
    """Unit-bandwidth kernel density K(v)."""
    fam = _as_family(kernel)
    v = np.asarray(v, dtype=float)
    if fam is KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
    if fam is KernelFamily.LOGISTIC:
        e = np.exp(-np.abs(v))
        return e / (1.0 + e) ** 2
    inside = np.abs(v) <= 1.0
    if fam is KernelFamily.UNIFORM:
        return np.where(inside, 0.5, 0.0)
    return np.where(inside, 0.75 * (1.0 - v * v), 0.0)


def cdf(v, kernel=KernelFamily.GAUSSIAN):
    """Unit-bandwidth kernel CDF."""
    fam = _as_family(kernel)
    v = np.asarray(v, dtype=float)
    if fam is KernelFamily.GAUSSIAN:
        return special.ndtr(v)
    if fam is KernelFamily.LOGISTIC:
        return special.expit(v)
    w = np.clip(v, -1.0, 1.0)
    if fam is KernelFamily.UNIFORM:
        return 0.5 * (w + 1.0)
    return 0.5 + 0.75 * w - 0.25 * w ** 3


def integrated_cdf(a, kernel=KernelFamily.GAUSSIAN):
    """G(a) = int_{-inf}^a cdf(v) dv = E[(a - V)_+] for V ~ K."""
    fam = _as_family(kernel)
    a = np.asarray(a, dtype=float)
    if fam is KernelFamily.GAUSSIAN:
        return a * special.ndtr(a) + np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    if fam is KernelFamily.LOGISTIC:
        return np.logaddexp(0.0, a)
    w = np.clip(a, -1.0, 1.0)
    if fam is KernelFamily.UNIFORM:
        inner = 0.25 * (w + 1.0) ** 2
    else:
        inner = 0.1875 + 0.5 * w + 0.375 * w ** 2 - 0.0625 * w ** 4
    # past the support G grows linearly with slope one
    return inner + np.maximum(a - 1.0, 0.0)


def kernel_cdf(u, spec: KernelSpec):
    """CDF of the bandwidth-h kernel, Kc(u / h)."""
    return cdf(np.asarray(u, dtype=float) / spec.bandwidth, spec.family)


def check_loss(r, tau):
    r = np.asarray(r, dtype=float)
    return r * (tau - (r < 0))


def smoothed_check(r, tau, spec: KernelSpec):
    """Per-observation smoothed loss as a function of the residual y - x'b."""
    h = spec.bandwidth
    r = np.asarray(r, dtype=float)
    return tau * r + h * integrated_cdf(-r / h, spec.family)


def _check_dims(X, beta, Y):
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or beta.ndim != 1 or Y.ndim != 1:
        raise ValueError("expected X 2-d, beta and Y 1-d")
    if X.shape[1] != beta.shape[0] or X.shape[0] != Y.shape[0]:
        raise ValueError(
            f"dimension mismatch: X {X.shape}, beta {beta.shape}, Y {Y.shape}")
    return X, beta, Y


def smoothed_loss(X, beta, Y, tau, spec: KernelSpec) -> float:
    """(1/n) sum_i int rho_tau(u) K_h(u + x_i'beta - y_i) du."""
    X, beta, Y = _check_dims(X, beta, Y)
    return float(np.mean(smoothed_check(Y - X @ beta, tau, spec)))


def score_weights(X, beta, Y, tau, spec: KernelSpec):
    """Per-observation gradient weights Kc((x_i'beta - y_i)/h) - tau."""
    X, beta, Y = _check_dims(X, beta, Y)
    return cdf((X @ beta - Y) / spec.bandwidth, spec.family) - tau


def smoothed_gradient(X, beta, Y, tau, spec: KernelSpec):
    X, beta, Y = _check_dims(X, beta, Y)
    w = cdf((X @ beta - Y) / spec.bandwidth, spec.family) - tau
    return X.T @ w / X.shape[0]


def curvature_weights(X, beta, Y, spec: KernelSpec):
    """K_h(x_i'beta - y_i)."""
    X, beta, Y = _check_dims(X, beta, Y)
    h = spec.bandwidth
    return density((X @ beta - Y) / h, spec.family) / h


def smoothed_hessian(X, beta, Y, tau, spec: KernelSpec):
    X, beta, Y = _check_dims(X, beta, Y)
    w = curvature_weights(X, beta, Y, spec)
    H = (X * w[:, None]).T @ X / X.shape[0]
    return 0.5 * (H + H.T)


def default_lambda(c: float, n: int, p: int) -> float:
    """c * sqrt(log(p) / n): penalty level on the mean-loss scale."""
    if n < 1 or p < 1 or c <= 0:
        raise ValueError("need n >= 1, p >= 1, c > 0")
    return c * math.sqrt(math.log(p) / n)


def selection_bandwidth(n: int, p: int, tau: float) -> float:
    return max(0.05, math.sqrt(tau * (1.0 - tau)) * (math.log(p) / n) ** 0.25)


def inference_bandwidth(n: int, q: int) -> float:
    return ((q + math.log(n)) / n) ** 0.4


def default_bandwidths(n: int, p: int, tau: float, q: int | None = None,
                       same: bool = True) -> tuple[float, float]:
    """(h_select, h_infer).  With ``same`` the inference bandwidth equals the
    selection one; otherwise it is ((q + log n)/n)^(2/5)."""
    if n < 2 or p < 1 or not 0 < tau < 1:
        raise ValueError("need n >= 2, p >= 1, 0 < tau < 1")
    h = selection_bandwidth(n, p, tau)
    if same:
        return h, h
    if q is None or q < 0:
        raise ValueError("q >= 0 required for the separate inference bandwidth")
    return h, inference_bandwidth(n, q)
