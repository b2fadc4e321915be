"""Plug-in moment matrices for the refitted estimator and the auxiliary
statistic that carries the nuisance information.

All expectations are replaced by empirical averages at the refitted
coefficients.  Scores use the sign convention ``(Kc(r/h) - tau) x`` with
``r = x_E'b - y``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec, cdf, density

RIDGE_COND = 1e10


class SingularMomentError(np.linalg.LinAlgError):
    pass


class AuxVariant(str, enum.Enum):
    SAME = "same-bandwidth"
    GENERAL = "general"


@dataclass
class MomentEstimates:
    """Moment matrices over all p columns.

    ``J``/``H`` use the inference bandwidth, ``J_tilde``/``H_tilde`` the
    selection bandwidth and ``K_cross[a, b] = Cov(score_select_a,
    score_infer_b)``.  ``Sigma_EE`` is indexed in the order of ``E``.
    """
    E: np.ndarray
    J: np.ndarray
    J_tilde: np.ndarray
    H: np.ndarray
    H_tilde: np.ndarray
    K_cross: np.ndarray
    Sigma_EE: np.ndarray
    same_bandwidth: bool
    ridge_added: float = 0.0

    @property
    def sigma_sq(self) -> np.ndarray:
        return np.diag(self.Sigma_EE).copy()

    def sigma_j_sq(self, j: int) -> float:
        return float(self.Sigma_EE[self.position(j), self.position(j)])

    def position(self, j: int) -> int:
        hits = np.flatnonzero(self.E == j)
        if hits.size == 0:
            raise KeyError(f"column {j} is not in the selected set")
        return int(hits[0])


def _scores(X, r, tau, spec: KernelSpec):
    w = cdf(r / spec.bandwidth, spec.family) - tau
    return X * w[:, None]


def _hessian_moment(X, r, spec: KernelSpec):
    h = spec.bandwidth
    w = density(r / h, spec.family) / h
    J = (X * w[:, None]).T @ X / X.shape[0]
    return 0.5 * (J + J.T)


def _cross_cov(A, B):
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    return Ac.T @ Bc / A.shape[0]


def estimate_moments(X, Y, beta_E, E, tau, spec_select: KernelSpec,
                     spec_infer: KernelSpec | None = None) -> MomentEstimates:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    E = np.asarray(E, dtype=int)
    beta_E = np.asarray(beta_E, dtype=float)
    if spec_infer is None:
        spec_infer = spec_select
    same = spec_select == spec_infer
    r = X[:, E] @ beta_E - Y

    psi = _scores(X, r, tau, spec_infer)
    J = _hessian_moment(X, r, spec_infer)
    H = _cross_cov(psi, psi)
    H = 0.5 * (H + H.T)
    if same:
        J_tilde, H_tilde, K_cross = J, H, H
    else:
        psi_sel = _scores(X, r, tau, spec_select)
        J_tilde = _hessian_moment(X, r, spec_select)
        H_tilde = _cross_cov(psi_sel, psi_sel)
        H_tilde = 0.5 * (H_tilde + H_tilde.T)
        K_cross = _cross_cov(psi_sel, psi)

    J_EE = J[np.ix_(E, E)]
    ridge = 0.0
    cond = np.linalg.cond(J_EE) if E.size else 1.0
    if not np.isfinite(cond):
        raise SingularMomentError(f"J_EE is singular (condition number {cond})")
    if cond > RIDGE_COND:
        ridge = 1e-8 * float(np.trace(J_EE)) / E.size
        warnings.warn(f"J_EE ill-conditioned (cond {cond:.3g}); adding ridge {ridge:.3g}")
        J = J.copy()
        J[E, E] += ridge
        if same:
            J_tilde = J
        J_EE = J[np.ix_(E, E)]
    Jinv = np.linalg.inv(J_EE)
    Sigma = Jinv @ H[np.ix_(E, E)] @ Jinv
    Sigma = 0.5 * (Sigma + Sigma.T)
    if np.any(np.diag(Sigma) <= 0):
        raise SingularMomentError("non-positive sandwich variance")
    return MomentEstimates(E=E, J=J, J_tilde=J_tilde, H=H, H_tilde=H_tilde,
                           K_cross=K_cross, Sigma_EE=Sigma, same_bandwidth=same,
                           ridge_added=ridge)


@dataclass
class AuxiliaryStatistic:
    """gamma for one selected coordinate j (on the natural, not sqrt(n), scale).

    First block: the other selected coefficients decorrelated from beta_j
    (length q-1).  Second block: the corrected gradient over the unselected
    columns (length p-q) or, for the general variant, over all p columns.
    """
    gamma: np.ndarray
    variant: AuxVariant
    j: int
    n_first: int


def auxiliary_statistic(j, X, Y, beta_E, moments: MomentEstimates, tau,
                        spec_select: KernelSpec,
                        variant: AuxVariant | str | None = None) -> AuxiliaryStatistic:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    E = moments.E
    p = X.shape[1]
    k = moments.position(j)
    if variant is None:
        variant = AuxVariant.SAME if moments.same_bandwidth else AuxVariant.GENERAL
    variant = AuxVariant(variant)
    if variant is AuxVariant.SAME and not moments.same_bandwidth:
        raise ValueError("same-bandwidth statistic requested with distinct bandwidths")
    Ep = np.setdiff1d(np.arange(p), E)

    Sigma = moments.Sigma_EE
    first = beta_E - Sigma[:, k] * beta_E[k] / Sigma[k, k]
    first = np.delete(first, k)

    r = X[:, E] @ beta_E - Y
    w = cdf(r / spec_select.bandwidth, spec_select.family) - tau
    grad = X.T @ w / X.shape[0]
    J_EE = moments.J[np.ix_(E, E)]
    H_EE = moments.H[np.ix_(E, E)]
    A = np.linalg.solve(H_EE, J_EE)            # H_EE^{-1} J_EE
    if variant is AuxVariant.SAME:
        rows = Ep
        corr = moments.H[np.ix_(rows, E)] @ A - moments.J[np.ix_(rows, E)]
    else:
        rows = np.arange(p)
        corr = moments.K_cross[np.ix_(rows, E)] @ A - moments.J_tilde[np.ix_(rows, E)]
    second = grad[rows] + corr @ beta_E
    return AuxiliaryStatistic(gamma=np.concatenate([first, second]), variant=variant,
                              j=int(j), n_first=first.size)
