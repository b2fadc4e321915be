"""End-to-end inference: select, refit, estimate moments, build the event
geometry, invert the pivot.  Also the two baselines (naive reuse of the data
and sample splitting) with the same report type.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .geometry import GeometryError, build_geometry
from .kernels import (KernelFamily, KernelSpec, default_lambda, inference_bandwidth,
                      selection_bandwidth)
from .moments import AuxVariant, SingularMomentError, auxiliary_statistic, estimate_moments
from .pivot import (PivotContext, PivotUnderflowError, invert_interval, pivot_value,
                    pvalue_from_pivot)
from .solver import (PenalizedSolution, RandomizationSpec, SolverError, draw_randomization,
                     solve_randomized_penalized, solve_refit)

log = logging.getLogger(__name__)

INTERCEPT_NAME = "(Intercept)"


class Method(str, enum.Enum):
    PROPOSED = "Proposed"
    NAIVE = "Naive"
    SPLITTING = "Splitting"


class LambdaMode(str, enum.Enum):
    # c sqrt(log p / n) on the mean-loss scale, i.e. sqrt(n) times that in
    # the sqrt(n)-scaled objective
    MEAN = "mean"
    # c sqrt(log p / n) used directly in the sqrt(n)-scaled objective
    LITERAL = "literal"


class BandwidthMode(str, enum.Enum):
    SAME = "same"
    FORMULA = "formula"       # separate inference bandwidth ((q + log n)/n)^(2/5)
    EXPLICIT = "explicit"


@dataclass
class InferenceConfig:
    tau: float = 0.7
    alpha: float = 0.1
    lambda_scale: float = 0.6
    lambda_mode: LambdaMode = LambdaMode.MEAN
    kernel: KernelFamily = KernelFamily.GAUSSIAN
    bandwidth_mode: BandwidthMode = BandwidthMode.SAME
    h_select: float | None = None
    h_infer: float | None = None
    delta2: float = 1.0
    seed: int = 0
    split_fraction: float = 2.0 / 3.0
    standardize: bool = True
    intercept: bool = True
    penalize_intercept: bool = False
    randomize_naive: bool = False
    tol_invert: float = 1e-4

    def __post_init__(self):
        self.lambda_mode = LambdaMode(self.lambda_mode)
        self.kernel = KernelFamily(self.kernel)
        self.bandwidth_mode = BandwidthMode(self.bandwidth_mode)
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.delta2 < 0:
            raise ValueError("delta2 must be non-negative")
        if self.lambda_scale <= 0:
            raise ValueError("lambda_scale must be positive")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.bandwidth_mode is BandwidthMode.EXPLICIT and self.h_select is None:
            raise ValueError("explicit bandwidth mode needs h_select")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
        return d


@dataclass
class ReportRow:
    name: str
    j: int
    estimate: float
    lcb: float
    ucb: float
    pvalue: float
    sigma: float = float("nan")
    flags: str = ""


@dataclass
class InferenceReport:
    method: Method
    rows: list[ReportRow]
    config: dict
    seed: int
    flags: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    # pivot contexts keyed by predictor index, on the working (standardized)
    # scale; proposed method only, not serialized
    contexts: dict = field(default_factory=dict, repr=False)
    # working-scale b = reported b * context_scale[j]
    context_scale: dict = field(default_factory=dict, repr=False)

    @property
    def selected(self) -> list[int]:
        return [r.j for r in self.rows]

    def as_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


# --- design ----------------------------------------------------------------

@dataclass
class Design:
    X: np.ndarray               # working matrix (standardized, intercept first)
    penalty: np.ndarray
    names: list[str]            # predictor names (no intercept)
    center: np.ndarray
    scale: np.ndarray
    offset: int                 # 1 with an intercept column, else 0

    @property
    def p(self) -> int:
        return len(self.names)

    def predictor_index(self, col: int) -> int:
        return col - self.offset


def prepare_design(X, config: InferenceConfig, names=None) -> Design:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    n, p = X.shape
    if names is None:
        names = [f"x{k + 1}" for k in range(p)]
    names = [str(s) for s in names]
    if len(names) != p:
        raise ValueError("names must have one entry per column")
    center = np.zeros(p)
    scale = np.ones(p)
    if config.standardize:
        center = X.mean(axis=0)
        sd = X.std(axis=0)
        const = sd <= 1e-12 * np.maximum(1.0, np.abs(center))
        if const.any():
            warnings.warn(f"constant columns left unscaled: {[names[k] for k in np.flatnonzero(const)]}")
        scale = np.where(const, 1.0, sd)
        if not config.intercept:
            center = np.zeros(p)
        Xw = (X - center) / scale
    else:
        Xw = X.copy()
    pen = np.ones(p)
    offset = 0
    if config.intercept:
        Xw = np.column_stack([np.ones(n), Xw])
        pen = np.r_[1.0 if config.penalize_intercept else 0.0, pen]
        offset = 1
    return Design(X=Xw, penalty=pen, names=names, center=center, scale=scale, offset=offset)


def solver_lambda(config: InferenceConfig, n: int, p: int) -> float:
    lam = default_lambda(config.lambda_scale, n, p)
    return math.sqrt(n) * lam if config.lambda_mode is LambdaMode.MEAN else lam


def bandwidths(config: InferenceConfig, n: int, p: int, q: int | None = None):
    """(h_select, h_infer); h_infer may depend on the selected size q."""
    if config.bandwidth_mode is BandwidthMode.EXPLICIT:
        h = float(config.h_select)
        return h, float(config.h_infer) if config.h_infer is not None else h
    h = selection_bandwidth(n, max(p, 2), config.tau)
    if config.bandwidth_mode is BandwidthMode.SAME:
        return h, h
    if q is None:
        return h, None
    return h, inference_bandwidth(n, q)


def _streams(config: InferenceConfig, rng):
    """(randomization stream, split stream) for a call."""
    if rng is not None:
        return rng, rng
    ss = np.random.SeedSequence(config.seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _select(design: Design, Y, config: InferenceConfig, h, omega):
    n = design.X.shape[0]
    lam = solver_lambda(config, n, design.p)
    sol = solve_randomized_penalized(design.X, Y, config.tau, KernelSpec(config.kernel, h),
                                     lam, omega, design.penalty)
    if not sol.converged:
        raise SolverError(f"penalized solver did not converge (KKT {sol.kkt_residual:.3g})")
    return sol, lam


def _selected_predictors(sol: PenalizedSolution, design: Design):
    """Active columns that are predictors (not an unpenalized intercept)."""
    E = sol.active_set
    return [int(c) for c in E if c >= design.offset]


def _row_values(design: Design, col: int, est, lcb, ucb):
    k = design.predictor_index(col)
    s = design.scale[k]
    return design.names[k], k, float(est / s), float(lcb / s), float(ucb / s)


def _empty(method, config, diagnostics, flags):
    return InferenceReport(method=method, rows=[], config=config.to_dict(), seed=config.seed,
                           flags=flags, diagnostics=diagnostics)


# --- proposed ------------------------------------------------------------------

def selective_inference(X, Y, tau: float | None = None, config: InferenceConfig | None = None,
                        names=None, rng=None) -> InferenceReport:
    """Randomized selection followed by pivot-based intervals for each selected
    predictor.  ``rng`` overrides the config seed for the randomization draw."""
    config = InferenceConfig() if config is None else config
    if tau is not None and tau != config.tau:
        config = InferenceConfig(**{**config.to_dict(), "tau": tau})
    if not config.delta2 > 0:
        raise ValueError("the proposed method needs delta2 > 0")
    Y = np.asarray(Y, dtype=float)
    design = prepare_design(X, config, names)
    n, p_all = design.X.shape
    rng_omega, _ = _streams(config, rng)
    h, _ = bandwidths(config, n, design.p)
    Omega = config.delta2 * np.eye(p_all)
    omega = draw_randomization(RandomizationSpec(Omega), n, rng_omega)
    sol, lam = _select(design, Y, config, h, omega)
    diag = {"n": n, "p": design.p, "lambda_solver": lam, "h_select": h,
            "kkt_residual": sol.kkt_residual, "solver_iterations": sol.iterations}
    cols = _selected_predictors(sol, design)
    if not cols:
        return _empty(Method.PROPOSED, config, diag, ["empty_selection"])
    E = sol.active_set
    _, h_inf = bandwidths(config, n, design.p, q=len(cols))
    diag["h_infer"] = h_inf
    if n <= E.size:
        raise SolverError(f"n = {n} does not exceed the selected size {E.size}")
    spec_sel = KernelSpec(config.kernel, h)
    spec_inf = KernelSpec(config.kernel, h_inf)
    ref = solve_refit(design.X[:, E], Y, config.tau, spec_inf)
    mom = estimate_moments(design.X, Y, ref.beta_E, E, config.tau, spec_sel, spec_inf)
    rootn = math.sqrt(n)
    rows, contexts = [], {}
    residuals = []
    for c in cols:
        k = mom.position(c)
        est = float(ref.beta_E[k])
        sig2 = float(mom.Sigma_EE[k, k])
        flags = []
        try:
            aux = auxiliary_statistic(c, design.X, Y, ref.beta_E, mom, config.tau, spec_sel)
            geo = build_geometry(c, sol, mom, aux, Omega, n, beta_j=est)
            residuals.append(geo.residual)
            ctx = PivotContext(geo, rootn * est, sig2, n)
            iv = invert_interval(config.alpha, ctx, tol_invert=config.tol_invert)
            p0 = pvalue_from_pivot(pivot_value(0.0, ctx))
            lcb, ucb = iv.lcb, iv.ucb
            if iv.unbounded:
                flags.append("unbounded")
            if not lcb <= est <= ucb:
                flags.append("estimate_outside")
            contexts[design.predictor_index(c)] = ctx
        except (GeometryError, PivotUnderflowError, SingularMomentError,
                np.linalg.LinAlgError) as exc:
            log.warning("inference failed for column %d: %s", c, exc)
            lcb = ucb = p0 = float("nan")
            flags.append(f"error:{type(exc).__name__}")
        name, j, e_, l_, u_ = _row_values(design, c, est, lcb, ucb)
        rows.append(ReportRow(name, j, e_, l_, u_, p0, math.sqrt(sig2) / design.scale[j],
                              ";".join(flags)))
    outside = sum("estimate_outside" in r.flags for r in rows)
    if outside:
        warnings.warn(f"{outside} proposed interval(s) exclude the refitted estimate")
    diag["linearization_residual"] = float(np.max(residuals)) if residuals else float("nan")
    diag["variant"] = (AuxVariant.SAME if mom.same_bandwidth else AuxVariant.GENERAL).value
    return InferenceReport(method=Method.PROPOSED, rows=rows, config=config.to_dict(),
                           seed=config.seed, diagnostics=diag, contexts=contexts,
                           context_scale={j: float(design.scale[j]) for j in contexts})


# --- baselines -----------------------------------------------------------------

def _wald_rows(design: Design, cols, E, beta_E, mom, n, alpha, flags_extra=""):
    z = stats.norm.ppf(1 - alpha / 2)
    rows = []
    for c in cols:
        k = mom.position(c)
        est = float(beta_E[k])
        se = math.sqrt(float(mom.Sigma_EE[k, k]) / n)
        pv = float(2 * stats.norm.sf(abs(est) / se))
        name, j, e_, l_, u_ = _row_values(design, c, est, est - z * se, est + z * se)
        rows.append(ReportRow(name, j, e_, l_, u_, pv, math.sqrt(n) * se / design.scale[j],
                              flags_extra))
    return rows


def naive_inference(X, Y, tau: float | None = None, config: InferenceConfig | None = None,
                    names=None, rng=None) -> InferenceReport:
    """Selection and Wald intervals on the same data, ignoring selection."""
    config = InferenceConfig() if config is None else config
    if tau is not None and tau != config.tau:
        config = InferenceConfig(**{**config.to_dict(), "tau": tau})
    Y = np.asarray(Y, dtype=float)
    design = prepare_design(X, config, names)
    n, p_all = design.X.shape
    h, _ = bandwidths(config, n, design.p)
    omega = None
    if config.randomize_naive and config.delta2 > 0:
        rng_omega, _ = _streams(config, rng)
        omega = draw_randomization(RandomizationSpec(config.delta2 * np.eye(p_all)), n, rng_omega)
    sol, lam = _select(design, Y, config, h, omega)
    diag = {"n": n, "p": design.p, "lambda_solver": lam, "h_select": h,
            "kkt_residual": sol.kkt_residual}
    cols = _selected_predictors(sol, design)
    if not cols:
        return _empty(Method.NAIVE, config, diag, ["empty_selection"])
    E = sol.active_set
    _, h_inf = bandwidths(config, n, design.p, q=len(cols))
    diag["h_infer"] = h_inf
    spec_inf = KernelSpec(config.kernel, h_inf)
    ref = solve_refit(design.X[:, E], Y, config.tau, spec_inf)
    mom = estimate_moments(design.X, Y, ref.beta_E, E, config.tau, spec_inf)
    rows = _wald_rows(design, cols, E, ref.beta_E, mom, n, config.alpha)
    return InferenceReport(method=Method.NAIVE, rows=rows, config=config.to_dict(),
                           seed=config.seed, diagnostics=diag)


def split_indices(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive (selection, inference) index sets, each sorted."""
    n1 = int(round(fraction * n))
    if not 0 < n1 < n:
        raise ValueError(f"split fraction {fraction} leaves an empty fold at n = {n}")
    perm = rng.permutation(n)
    return np.sort(perm[:n1]), np.sort(perm[n1:])


def splitting_inference(X, Y, tau: float | None = None, config: InferenceConfig | None = None,
                        names=None, rng=None) -> InferenceReport:
    """Select on one fold (no randomization), Wald intervals from the other."""
    config = InferenceConfig() if config is None else config
    if tau is not None and tau != config.tau:
        config = InferenceConfig(**{**config.to_dict(), "tau": tau})
    Y = np.asarray(Y, dtype=float)
    design = prepare_design(X, config, names)
    n, _ = design.X.shape
    _, rng_split = _streams(config, rng)
    i1, i2 = split_indices(n, config.split_fraction, rng_split)
    n1, n2 = i1.size, i2.size
    h1, _ = bandwidths(config, n1, design.p)
    sub = Design(design.X[i1], design.penalty, design.names, design.center, design.scale,
                 design.offset)
    sol, lam = _select(sub, Y[i1], config, h1, None)
    diag = {"n": n, "p": design.p, "n_select": n1, "n_infer": n2, "lambda_solver": lam,
            "h_select": h1, "kkt_residual": sol.kkt_residual}
    cols = _selected_predictors(sol, design)
    if not cols:
        return _empty(Method.SPLITTING, config, diag, ["empty_selection"])
    E = sol.active_set
    if n2 <= E.size:
        raise SolverError(f"held-out fold of size {n2} cannot support {E.size} columns")
    h2, h2_inf = bandwidths(config, n2, design.p, q=len(cols))
    h_use = h2 if h2_inf is None else h2_inf
    diag["h_infer"] = h_use
    spec = KernelSpec(config.kernel, h_use)
    X2, Y2 = design.X[i2], Y[i2]
    ref = solve_refit(X2[:, E], Y2, config.tau, spec)
    mom = estimate_moments(X2, Y2, ref.beta_E, E, config.tau, spec)
    rows = _wald_rows(design, cols, E, ref.beta_E, mom, n2, config.alpha)
    return InferenceReport(method=Method.SPLITTING, rows=rows, config=config.to_dict(),
                           seed=config.seed, diagnostics=diag)


METHODS = {
    Method.PROPOSED: selective_inference,
    Method.NAIVE: naive_inference,
    Method.SPLITTING: splitting_inference,
}
