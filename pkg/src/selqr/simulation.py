"""Synthetic designs, target coefficients, metrics and the replication harness.

Models 1-3 have noise variance 4, Models 4-6 repeat them with variance 1 and
Model 7 has a cubic response.  Within each replication every method sees the
same dataset; RNG streams are derived from (master seed, model, signal, rep)
so results do not depend on how replications are scheduled.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from .kernels import KernelSpec, inference_bandwidth, selection_bandwidth
from .pipeline import METHODS, BandwidthMode, InferenceConfig, InferenceReport, Method
from .pivot import pivot_value
from .solver import solve_refit

WORKERS_ENV = "SELQR_WORKERS"
SIGNAL_LEVELS = {0.1: "Low", 0.5: "Medium", 1.0: "High"}
INTERCEPT = 0.2


@dataclass(frozen=True)
class ModelSpec:
    model_id: int
    n: int
    p: int
    c: float
    tau: float = 0.7
    ar_rho: float = 0.5
    noise_variance: float | None = None

    def __post_init__(self):
        if self.model_id not in range(1, 8):
            raise ValueError(f"model_id must be in 1..7, got {self.model_id}")
        if self.p < 6:
            raise ValueError("p must be at least 6")
        if not abs(self.ar_rho) < 1:
            raise ValueError("ar_rho must lie in (-1, 1)")
        if self.noise_variance is None:
            object.__setattr__(self, "noise_variance", 4.0 if self.model_id <= 3 else 1.0)

    @property
    def family(self) -> int:
        """1, 2 or 3 for the three generative recipes (7 for the cubic model)."""
        return self.model_id if self.model_id in (1, 2, 3, 7) else self.model_id - 3

    @property
    def support(self) -> np.ndarray:
        return np.arange(6) if self.family == 2 else np.arange(5)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    names: list[str]
    spec: ModelSpec


def ar_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _ar_block(rng, n, p, rho):
    # AR(1) recursion has exactly the covariance rho^|j-k|
    Z = rng.standard_normal((n, p))
    out = np.empty_like(Z)
    out[:, 0] = Z[:, 0]
    s = math.sqrt(1.0 - rho * rho)
    for k in range(1, p):
        out[:, k] = rho * out[:, k - 1] + s * Z[:, k]
    return out


def generate(spec: ModelSpec, seed) -> Dataset:
    """Draw one dataset; ``seed`` is anything accepted by default_rng."""
    rng = np.random.default_rng(seed)
    n, p, c = spec.n, spec.p, spec.c
    sd = math.sqrt(spec.noise_variance)
    fam = spec.family
    if fam in (1, 7):
        X = _ar_block(rng, n, p, spec.ar_rho)
        eps = sd * rng.standard_normal(n)
        lin = INTERCEPT + c * X[:, :5].sum(axis=1) + eps
        Y = np.cbrt(lin) if fam == 7 else lin
    elif fam == 2:
        x2 = rng.uniform(0.0, 2.0, n)
        X1 = _ar_block(rng, n, p - 1, spec.ar_rho)
        eps = sd * rng.standard_normal(n)
        Y = INTERCEPT + c * X1[:, :5].sum(axis=1) + 1.5 * x2 * eps
        X = np.column_stack([x2, X1])
    else:
        U2 = rng.uniform(0.0, 2.0, (n, 2))
        X3 = _ar_block(rng, n, p - 2, spec.ar_rho)
        u = rng.uniform(0.0, 1.0, n)
        Y = 2 * c * u + c * u * U2.sum(axis=1) + c * X3[:, :3].sum(axis=1)
        X = np.column_stack([U2, X3])
    return Dataset(X=X, Y=Y, names=[f"x{k + 1}" for k in range(p)], spec=spec)


def true_coefficients(spec: ModelSpec) -> tuple[float, np.ndarray]:
    """(beta_0(tau), beta(tau)) of the linear conditional quantile."""
    if spec.family == 7:
        raise ValueError("model 7 has no linear conditional quantile; use target_oracle_mc")
    c, tau, p = spec.c, spec.tau, spec.p
    qe = stats.norm.ppf(tau, scale=math.sqrt(spec.noise_variance))
    beta = np.zeros(p)
    if spec.family == 1:
        beta[:5] = c
        return INTERCEPT + qe, beta
    if spec.family == 2:
        beta[0] = 1.5 * qe
        beta[1:6] = c
        return INTERCEPT, beta
    beta[:2] = c * tau
    beta[2:5] = c
    return 2 * c * tau, beta


def true_target(spec: ModelSpec, E) -> np.ndarray:
    """beta(tau) restricted to E; only valid when E contains the support."""
    E = np.asarray(E, dtype=int)
    if not set(spec.support.tolist()) <= set(E.tolist()):
        raise ValueError("E does not contain the support; use target_oracle_mc")
    return true_coefficients(spec)[1][E]


def target_oracle_mc(spec: ModelSpec, E, tau: float, h_infer: float, seed=None,
                     n_prime_factor: int = 100, kernel="gaussian",
                     data: Dataset | None = None) -> np.ndarray:
    """Population refit on columns E approximated on an independent sample of
    size n_prime_factor * n (intercept fitted, not returned)."""
    E = np.asarray(E, dtype=int)
    if data is None:
        big = replace(spec, n=n_prime_factor * spec.n)
        data = generate(big, seed)
    XE = np.column_stack([np.ones(data.X.shape[0]), data.X[:, E]])
    fit = solve_refit(XE, data.Y, tau, KernelSpec(kernel, h_infer))
    return fit.beta_E[1:]


def targets_for(spec: ModelSpec, E, h_infer: float, oracle) -> np.ndarray:
    """True coefficients when E is the support, or any superset of it in the
    location-shift family (smoothing then only moves the intercept); the
    Monte Carlo oracle otherwise."""
    E = np.asarray(E, dtype=int)
    if E.size == 0:
        return np.zeros(0)
    S = set(spec.support.tolist())
    covered = S <= set(E.tolist())
    if spec.family != 7 and covered and (spec.family == 1 or E.size == len(S)):
        return true_target(spec, E)
    return oracle(E, h_infer)


# --- metrics -------------------------------------------------------------------

def f1_score(tp: int, fp: int, fn: int) -> float:
    den = tp + 0.5 * (fp + fn)
    return float(tp / den) if den > 0 else 0.0


@dataclass
class Metrics:
    coverage: float
    mean_length: float
    length_ratio: float
    f1_before: float
    f1_after: float
    recall: float
    unbounded_fraction: float
    q: int = 0


def compute_metrics(report: InferenceReport, targets, truth_support,
                    reference_length: float | None = None) -> Metrics:
    """Metrics of one report.  ``targets`` aligns with ``report.rows``;
    ``reference_length`` (the Splitting mean length) gives the length ratio."""
    rows = report.rows
    targets = np.asarray(targets, dtype=float)
    S = set(int(s) for s in truth_support)
    E = [r.j for r in rows]
    q = len(E)
    lcb = np.array([r.lcb for r in rows], dtype=float)
    ucb = np.array([r.ucb for r in rows], dtype=float)
    covered = (lcb <= targets) & (targets <= ucb) if q else np.zeros(0, bool)
    coverage = float(covered.sum()) / max(q, 1)
    lengths = ucb - lcb
    finite = np.isfinite(lengths)
    mean_length = float(lengths[finite].mean()) if finite.any() else float("nan")
    unbounded = float((~finite).sum()) / q if q else 0.0
    tp = len(S.intersection(E))
    f1_before = f1_score(tp, q - tp, len(S) - tp)
    excl = [j for j, lo, hi in zip(E, lcb, ucb) if lo > 0 or hi < 0]
    tp_a = len(S.intersection(excl))
    f1_after = f1_score(tp_a, len(excl) - tp_a, len(S) - tp_a)
    recall = tp / len(S) if S else 0.0
    ratio = float("nan")
    if reference_length is not None and reference_length > 0 and np.isfinite(mean_length):
        ratio = mean_length / reference_length
    return Metrics(coverage=coverage, mean_length=mean_length, length_ratio=ratio,
                   f1_before=f1_before, f1_after=f1_after, recall=recall,
                   unbounded_fraction=unbounded, q=q)


# --- replication harness ---------------------------------------------------------

@dataclass
class SuiteConfig:
    models: tuple[int, ...] = (1, 2, 3)
    signals: tuple[float, ...] = (0.1, 0.5, 1.0)
    methods: tuple[str, ...] = ("Proposed", "Naive", "Splitting")
    reps: int = 200
    n: int = 400
    p: int = 50
    tau: float = 0.7
    seed: int = 2024
    oracle_factor: int = 100
    audit_grid: int = 0                 # >0: pivot audit on this many grid points
    inference: InferenceConfig = field(default_factory=lambda: InferenceConfig(standardize=False))

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if isinstance(self.inference, dict):
            self.inference = InferenceConfig(**self.inference)
        self.methods = tuple(Method(m).value for m in self.methods)
        self.models = tuple(int(m) for m in self.models)
        self.signals = tuple(float(c) for c in self.signals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inference"] = self.inference.to_dict()
        d["models"], d["signals"], d["methods"] = list(self.models), list(self.signals), list(self.methods)
        return d


def replication_streams(master: int, model_id: int, signal_index: int, rep: int):
    """Independent (data, randomization, split, oracle) seed sequences."""
    ss = np.random.SeedSequence(master, spawn_key=(model_id, signal_index, rep))
    return ss.spawn(4)


def _model_config(suite: SuiteConfig, spec: ModelSpec) -> InferenceConfig:
    cfg = replace(suite.inference, tau=suite.tau)
    if spec.family == 7 and cfg.bandwidth_mode is BandwidthMode.SAME:
        cfg = replace(cfg, bandwidth_mode=BandwidthMode.FORMULA)
    return cfg


COORD_COLUMNS = ["model", "c", "signal", "rep", "method", "j", "name", "estimate", "lcb",
                 "ucb", "pvalue", "target", "covered", "length", "in_support", "flags",
                 "audit_max_increase", "audit_lcb_err", "audit_ucb_err"]
REP_COLUMNS = ["model", "c", "signal", "rep", "method", "status", "q", "coverage",
               "mean_length", "length_ratio", "f1_before", "f1_after", "recall",
               "unbounded_fraction"]


def audit_pivot(ctx, lcb: float, ucb: float, estimate: float, alpha: float,
                scale: float = 1.0, grid: int = 200) -> tuple[float, float, float]:
    """(largest increase of the pivot along a b-grid around the interval,
    |pivot(LCB) - (1 - alpha/2)|, |pivot(UCB) - alpha/2|) on the working scale.
    Errors at infinite endpoints are NaN."""
    lo, hi, est = lcb * scale, ucb * scale, estimate * scale
    se = ctx.sigma / math.sqrt(ctx.n)
    width = hi - lo if math.isfinite(hi - lo) else 10.0 * se
    a = lo - 0.5 * width if math.isfinite(lo) else est - 10.0 * se - width
    b = hi + 0.5 * width if math.isfinite(hi) else est + 10.0 * se + width
    vals = np.array([pivot_value(v, ctx) for v in np.linspace(a, b, grid)])
    inc = float(max(np.max(np.diff(vals)), 0.0))
    e_lo = abs(pivot_value(lo, ctx) - (1 - alpha / 2)) if math.isfinite(lo) else float("nan")
    e_hi = abs(pivot_value(hi, ctx) - alpha / 2) if math.isfinite(hi) else float("nan")
    return inc, e_lo, e_hi


def run_one(suite: SuiteConfig, model_id: int, signal_index: int, rep: int):
    """All methods on one dataset.  Returns (per-rep rows, per-coordinate rows)."""
    c = suite.signals[signal_index]
    spec = ModelSpec(model_id, suite.n, suite.p, c, suite.tau)
    s_data, s_omega, s_split, s_oracle = replication_streams(suite.seed, model_id,
                                                             signal_index, rep)
    data = generate(spec, s_data)
    cfg = _model_config(suite, spec)
    oracle_cache: dict = {}
    oracle_data: list = []

    def oracle(E, h_inf):
        key = (tuple(int(e) for e in E), round(float(h_inf), 15))
        if key not in oracle_cache:
            if not oracle_data:
                big = replace(spec, n=suite.oracle_factor * spec.n)
                oracle_data.append(generate(big, s_oracle))
            oracle_cache[key] = target_oracle_mc(spec, E, cfg.tau, h_inf, data=oracle_data[0],
                                                 kernel=cfg.kernel)
        return oracle_cache[key]

    reports, failures = {}, {}
    for m in suite.methods:
        method = Method(m)
        rng = np.random.default_rng(s_split if method is Method.SPLITTING else s_omega)
        try:
            reports[m] = METHODS[method](data.X, data.Y, config=cfg, names=data.names, rng=rng)
        except Exception as exc:                # recorded, not fatal
            failures[m] = f"error:{type(exc).__name__}: {exc}"
    # targets at the full-sample inference bandwidth
    h_full = selection_bandwidth(spec.n, spec.p, cfg.tau)
    ref_len = None
    if "Splitting" in reports and reports["Splitting"].rows:
        lens = [r.ucb - r.lcb for r in reports["Splitting"].rows]
        ref_len = float(np.mean(lens))
    label = SIGNAL_LEVELS.get(c, str(c))
    rep_rows, coord_rows = [], []
    for m in suite.methods:
        base = {"model": model_id, "c": c, "signal": label, "rep": rep, "method": m}
        if m in failures:
            rep_rows.append({**base, "status": failures[m], "q": 0,
                             **{k: float("nan") for k in REP_COLUMNS[7:]}})
            continue
        rpt = reports[m]
        E = np.array(rpt.selected, dtype=int)
        h_inf = rpt.diagnostics.get("h_infer", h_full)
        if cfg.bandwidth_mode is BandwidthMode.SAME:
            h_inf = h_full
        elif E.size:
            h_inf = inference_bandwidth(spec.n, E.size)
        try:
            tg = targets_for(spec, E, h_inf, oracle)
        except Exception as exc:
            rep_rows.append({**base, "status": f"error:target:{type(exc).__name__}", "q": int(E.size),
                             **{k: float("nan") for k in REP_COLUMNS[7:]}})
            continue
        met = compute_metrics(rpt, tg, spec.support, ref_len)
        rep_rows.append({**base, "status": "ok", **{k: getattr(met, k) for k in REP_COLUMNS[6:]}})
        for r, t in zip(rpt.rows, tg):
            audit = (float("nan"),) * 3
            if suite.audit_grid and r.j in rpt.contexts:
                audit = audit_pivot(rpt.contexts[r.j], r.lcb, r.ucb, r.estimate, cfg.alpha,
                                    rpt.context_scale[r.j], suite.audit_grid)
            coord_rows.append({**base, "j": r.j, "name": r.name, "estimate": r.estimate,
                               "lcb": r.lcb, "ucb": r.ucb, "pvalue": r.pvalue,
                               "target": float(t), "covered": bool(r.lcb <= t <= r.ucb),
                               "length": r.ucb - r.lcb, "in_support": r.j in set(spec.support.tolist()),
                               "flags": r.flags, "audit_max_increase": audit[0],
                               "audit_lcb_err": audit[1], "audit_ucb_err": audit[2]})
    return rep_rows, coord_rows


def _run_task(args):
    suite, model_id, signal_index, rep = args
    return run_one(suite, model_id, signal_index, rep)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class SuiteResult:
    reps: pd.DataFrame
    coords: pd.DataFrame
    summary: pd.DataFrame
    config: dict

    def cell(self, model: int, c: float, method: str) -> pd.Series:
        s = self.summary
        hit = s[(s.model == model) & (np.isclose(s.c, c)) & (s.method == method)]
        if hit.empty:
            raise KeyError((model, c, method))
        return hit.iloc[0]


def aggregate(reps: pd.DataFrame) -> pd.DataFrame:
    """Per (model, signal, method) means; failed replications are counted."""
    out = []
    keys = ["model", "c", "signal", "method"]
    for key, g in reps.groupby(keys, sort=False):
        ok = g[g.status == "ok"]
        nonempty = ok[ok.q > 0]
        out.append({**dict(zip(keys, key)), "reps": int(len(g)), "failed": int((g.status != "ok").sum()),
                    "coverage": float(ok.coverage.mean()) if len(ok) else float("nan"),
                    "mean_length": float(nonempty.mean_length.mean()) if len(nonempty) else float("nan"),
                    "length_ratio": float(ok.length_ratio.dropna().mean()) if ok.length_ratio.notna().any() else float("nan"),
                    "f1_before": float(ok.f1_before.mean()) if len(ok) else float("nan"),
                    "f1_after": float(ok.f1_after.mean()) if len(ok) else float("nan"),
                    "recall": float(ok.recall.mean()) if len(ok) else float("nan"),
                    "unbounded_fraction": float(ok.unbounded_fraction.mean()) if len(ok) else float("nan"),
                    "mean_q": float(ok.q.mean()) if len(ok) else float("nan")})
    return pd.DataFrame(out)


def run_replications(suite: SuiteConfig, workers: int | None = None, progress=None) -> SuiteResult:
    """Run the model x signal x method grid.  Output is ordered by task index,
    so it is identical for any worker count."""
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [(suite, m, k, r) for m in suite.models for k in range(len(suite.signals))
             for r in range(suite.reps)]
    if workers == 1:
        results = []
        for i, t in enumerate(tasks):
            results.append(_run_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    rep_rows = [row for rr, _ in results for row in rr]
    coord_rows = [row for _, cr in results for row in cr]
    reps = pd.DataFrame(rep_rows, columns=REP_COLUMNS)
    coords = pd.DataFrame(coord_rows, columns=COORD_COLUMNS)
    return SuiteResult(reps=reps, coords=coords, summary=aggregate(reps), config=suite.to_dict())
