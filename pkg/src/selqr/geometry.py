"""Linearized geometry of the selection event for one selected coordinate.

Every p-vector here lives in the permuted order ``perm = (E, E')``: the
selected columns first (in the order of ``E``), then the unselected ones in
ascending order.  ``o = sqrt(n) * s_E * beta_lasso_E`` is the magnitude vector
of the randomized solution; it is split as

    o = Psi Lam * U / (Lam' Psi Lam) + V,    U = Lam' o,

and, holding V fixed, the sign constraints ``o_k > 0`` on penalized rows cut
U down to an interval [I1, I2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moments import AuxVariant, AuxiliaryStatistic, MomentEstimates
from .solver import PenalizedSolution

ZERO_REL = 1e-12


class GeometryError(np.linalg.LinAlgError):
    pass


@dataclass
class EventGeometry:
    M: np.ndarray
    N: np.ndarray
    T: np.ndarray
    Omega: np.ndarray
    Omega_inv: np.ndarray
    Psi: np.ndarray
    LambdaJ: np.ndarray
    kappa_sq: float
    U: float
    V: np.ndarray
    I1: float
    I2: float
    Q: np.ndarray
    P: np.ndarray
    dbar: np.ndarray
    constrained: np.ndarray
    variant: AuxVariant = AuxVariant.SAME
    gamma_scaled: np.ndarray | None = None    # sqrt(n) * gamma, permuted
    perm: np.ndarray | None = None
    residual: float = float("nan")

    @property
    def magnitudes(self) -> np.ndarray:
        """sqrt(n)|beta_lasso_E| reconstructed from U and V."""
        return self.Psi @ self.LambdaJ * self.U / self.kappa_sq + self.V


def truncation_interval(Psi, LambdaJ, V, constrained=None):
    """Endpoints of {u : (Psi Lam u / (Lam' Psi Lam) + V)_k > 0 on constrained k}.

    Rows whose Psi Lam entry is within ``1e-12 * max|Psi Lam|`` of zero are
    ignored; empty index sets give infinite endpoints.
    """
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    lam = np.asarray(LambdaJ, dtype=float).ravel()
    V = np.asarray(V, dtype=float).ravel()
    pl = Psi @ lam
    kappa_sq = float(lam @ pl)
    if not kappa_sq > 0:
        raise GeometryError("Lam' Psi Lam must be positive")
    if constrained is None:
        constrained = np.ones(V.size, dtype=bool)
    scale = float(np.max(np.abs(pl))) if pl.size else 0.0
    thr = ZERO_REL * scale
    pos = constrained & (pl > thr)
    neg = constrained & (pl < -thr)
    with np.errstate(divide="ignore"):
        ratio = kappa_sq * V / np.where(pl != 0, pl, 1.0)
    I1 = -float(np.min(ratio[pos])) if pos.any() else -math.inf
    I2 = -float(np.max(ratio[neg])) if neg.any() else math.inf
    return I1, I2


def geometry_from_matrices(M, N, T, Omega, magnitudes, dbar, constrained=None,
                           gamma_scaled=None, variant=AuxVariant.SAME,
                           perm=None, rhs=None) -> EventGeometry:
    """Assemble the event geometry from already permuted matrices.

    ``magnitudes`` is sqrt(n)|beta_lasso_E|; ``rhs`` (optional) is
    sqrt(n) omega - M sqrt(n) beta_j - N sqrt(n) gamma, used only for the
    residual diagnostic.
    """
    M = np.asarray(M, dtype=float).ravel()
    T = np.atleast_2d(np.asarray(T, dtype=float))
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    o = np.asarray(magnitudes, dtype=float).ravel()
    dbar = np.asarray(dbar, dtype=float).ravel()
    q = T.shape[1]
    if constrained is None:
        constrained = np.ones(q, dtype=bool)
    try:
        cf = np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("randomization covariance is not positive definite") from exc
    Omega_inv = np.linalg.inv(Omega)
    Omega_inv = 0.5 * (Omega_inv + Omega_inv.T)
    # T' Omega^{-1} T via the Cholesky factor
    Tw = np.linalg.solve(cf, T)
    G = Tw.T @ Tw
    try:
        Psi = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("T' Omega^{-1} T is singular") from exc
    if not np.all(np.isfinite(Psi)):
        raise GeometryError("T' Omega^{-1} T is singular")
    Psi = 0.5 * (Psi + Psi.T)
    lam = T.T @ (Omega_inv @ M)
    pl = Psi @ lam
    kappa_sq = float(lam @ pl)
    if not kappa_sq > 0:
        raise GeometryError("Lam' Psi Lam is not positive")
    U = float(lam @ o)
    V = o - pl * U / kappa_sq
    I1, I2 = truncation_interval(Psi, lam, V, constrained)
    Q = T @ pl / kappa_sq
    P = T @ V + dbar
    resid = float("nan")
    if rhs is not None:
        resid = float(np.max(np.abs(T @ o + dbar - np.asarray(rhs, dtype=float))))
    return EventGeometry(M=M, N=np.atleast_2d(np.asarray(N, dtype=float)), T=T,
                         Omega=Omega, Omega_inv=Omega_inv, Psi=Psi, LambdaJ=lam,
                         kappa_sq=kappa_sq, U=U, V=V, I1=I1, I2=I2, Q=Q, P=P,
                         dbar=dbar, constrained=np.asarray(constrained, dtype=bool),
                         variant=AuxVariant(variant), gamma_scaled=gamma_scaled,
                         perm=perm, residual=resid)


def event_matrices(j, moments: MomentEstimates, signs, variant=None, p=None):
    """M, N, T for coordinate ``j`` in the (E, E') order."""
    E = moments.E
    p = moments.J.shape[0] if p is None else p
    Ep = np.setdiff1d(np.arange(p), E)
    perm = np.concatenate([E, Ep])
    q = E.size
    k = moments.position(j)
    if variant is None:
        variant = AuxVariant.SAME if moments.same_bandwidth else AuxVariant.GENERAL
    variant = AuxVariant(variant)
    J_EE = moments.J[np.ix_(E, E)]
    H_EE = moments.H[np.ix_(E, E)]
    sig2 = float(moments.Sigma_EE[k, k])
    Jinv_ek = np.linalg.solve(J_EE, np.eye(q)[:, k])
    JS = np.delete(J_EE, k, axis=1)                         # J_EE S'_{E\j}
    signs = np.asarray(signs, dtype=float)
    if variant is AuxVariant.SAME:
        Hcol = moments.H[np.ix_(perm, E)]                   # [H_EE; H_E'E]
        M = -Hcol @ Jinv_ek / sig2
        B = moments.H[np.ix_(Ep, E)] @ np.linalg.solve(H_EE, JS)
        N = np.zeros((p, p - 1))
        N[:q, :q - 1] = -JS
        N[q:, :q - 1] = -B
        N[q:, q - 1:] = np.eye(p - q)
        T = moments.J[np.ix_(perm, E)] * signs[None, :]
    else:
        Kcol = moments.K_cross[np.ix_(perm, E)]
        M = -Kcol @ Jinv_ek / sig2
        N = np.zeros((p, p + q - 1))
        N[:, :q - 1] = -Kcol @ np.linalg.solve(H_EE, JS)
        N[:, q - 1:] = np.eye(p)
        T = moments.J_tilde[np.ix_(perm, E)] * signs[None, :]
    return M, N, T, perm


def build_geometry(j, sol: PenalizedSolution, moments: MomentEstimates,
                   aux: AuxiliaryStatistic, Omega, n: int, beta_j: float | None = None
                   ) -> EventGeometry:
    """Geometry for selected column ``j`` of a fitted randomized problem.

    ``Omega`` is the covariance of sqrt(n) omega in original coordinates.
    """
    E = moments.E
    if not np.array_equal(np.sort(E), np.sort(sol.active_set)):
        raise ValueError("moment estimates and solution disagree on the active set")
    if j not in set(E.tolist()):
        raise KeyError(f"column {j} is not selected")
    p = sol.beta.size
    order = np.array([int(np.flatnonzero(sol.active_set == e)[0]) for e in E])
    signs = sol.signs[order]
    M, N, T, perm = event_matrices(j, moments, signs, aux.variant, p)
    rootn = math.sqrt(n)
    o = rootn * signs * sol.beta[E]
    D = sol.subgradient()[perm]
    constrained = sol.penalty[E] > 0
    g = np.asarray(aux.gamma, dtype=float)
    if aux.variant is AuxVariant.GENERAL:
        g = np.concatenate([g[:aux.n_first], g[aux.n_first:][perm]])
    g_scaled = rootn * g
    Omega = np.asarray(Omega, dtype=float)[np.ix_(perm, perm)]
    rhs = None
    if beta_j is not None:
        rhs = rootn * sol.omega[perm] - M * rootn * beta_j - N @ g_scaled
    return geometry_from_matrices(M, N, T, Omega, o, D, constrained,
                                  gamma_scaled=g_scaled, variant=aux.variant,
                                  perm=perm, rhs=rhs)
