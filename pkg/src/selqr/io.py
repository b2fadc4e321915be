"""CSV ingestion and report serialization.

CSV outputs write floats with 17 significant digits; JSON outputs use the
shortest repr that round-trips, which is equally lossless.  Infinite interval
endpoints are written as the strings "inf" / "-inf" in JSON.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .pipeline import InferenceReport

FLOAT_FORMAT = "%.17g"
REPORT_COLUMNS = ["method", "name", "j", "estimate", "lcb", "ucb", "pvalue", "sigma", "flags"]


class DataError(ValueError):
    pass


@dataclass
class TableData:
    X: np.ndarray
    Y: np.ndarray
    names: list[str]
    response: str
    n_dropped: int = 0


def load_csv(path, response_column: str, drop_columns=(), one_hot_columns=()) -> TableData:
    """Numeric design from a CSV with a header row.

    Columns in ``one_hot_columns`` are expanded into indicators with the first
    (sorted) level dropped.  Rows with a missing value are dropped with a
    warning.  Any other non-numeric cell is an error naming its row and column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    df = pd.read_csv(path, dtype=str, keep_default_na=True, skipinitialspace=True)
    if response_column not in df.columns:
        raise DataError(f"response column {response_column!r} not found in {path}")
    missing = [c for c in list(drop_columns) + list(one_hot_columns) if c not in df.columns]
    if missing:
        raise DataError(f"columns not found in {path}: {missing}")
    df = df.drop(columns=list(drop_columns))
    na = df.isna().any(axis=1)
    n_dropped = int(na.sum())
    if n_dropped:
        warnings.warn(f"dropped {n_dropped} row(s) with missing values")
        df = df.loc[~na]
    one_hot = set(one_hot_columns)
    numeric = {}
    for col in df.columns:
        if col in one_hot:
            continue
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna()
        if bad.any():
            row = int(df.index[np.flatnonzero(bad.to_numpy())[0]])
            raise DataError(f"unparseable value {df[col].iloc[int(np.flatnonzero(bad.to_numpy())[0])]!r} "
                            f"at row {row + 1}, column {col!r}")
        numeric[col] = vals.astype(float)
    Y = numeric.pop(response_column).to_numpy()
    blocks, names = [], []
    for col in df.columns:
        if col == response_column:
            continue
        if col in one_hot:
            levels = sorted(df[col].unique().tolist())
            for lev in levels[1:]:
                blocks.append((df[col] == lev).to_numpy(dtype=float))
                names.append(f"{col}_{lev}")
        else:
            blocks.append(numeric[col].to_numpy())
            names.append(col)
    X = np.column_stack(blocks) if blocks else np.zeros((len(Y), 0))
    const = [nm for nm, v in zip(names, X.T) if v.size and np.all(v == v[0])]
    if const:
        warnings.warn(f"constant column(s): {const}")
    return TableData(X=X, Y=Y, names=names, response=response_column, n_dropped=n_dropped)


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if hasattr(v, "value") and not isinstance(v, (str, int)):
        return v.value
    return v


def dumps(obj) -> str:
    return json.dumps(_json_value(obj), indent=2, sort_keys=True, allow_nan=False)


def report_frame(reports) -> pd.DataFrame:
    recs = []
    for rpt in reports:
        for r in rpt.rows:
            recs.append({"method": rpt.method.value, "name": r.name, "j": r.j,
                         "estimate": r.estimate, "lcb": r.lcb, "ucb": r.ucb,
                         "pvalue": r.pvalue, "sigma": r.sigma, "flags": r.flags})
    return pd.DataFrame(recs, columns=REPORT_COLUMNS)


def report_dict(report: InferenceReport) -> dict:
    return {"version": __version__, "method": report.method.value, "seed": report.seed,
            "config": report.config, "flags": report.flags,
            "diagnostics": report.diagnostics, "rows": report.as_records()}


def write_csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def write_reports(reports, out_dir, stem: str = "report", extra: dict | None = None) -> dict:
    """<stem>.csv (one row per selected variable per method) and <stem>.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(report_frame(reports), out / f"{stem}.csv")
    payload = {"version": __version__, "reports": [report_dict(r) for r in reports]}
    if extra:
        payload.update(extra)
    write_json(payload, out / f"{stem}.json")
    return {"csv": str(out / f"{stem}.csv"), "json": str(out / f"{stem}.json")}


def error_payload(exc: BaseException, code: int, **context) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
            "version": __version__, **context}
