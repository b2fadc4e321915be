"""Command-line front end.

    selqr fit        --input data.csv --response y
    selqr infer      --input data.csv --response y [--method all]
    selqr simulate   --model 1 --n 400 --p 50 --c 1 --seed 7
    selqr replicate  --models 1 2 3 --signals 0.1 0.5 1 --reps 200

Options can also come from ``--config file.json`` (keys are the long option
names with dashes or underscores); explicit flags win.  Exit codes: 0 ok,
1 computation failure, 2 usage or I/O error.  Errors are reported as one JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .io import (DataError, dumps, error_payload, load_csv, write_csv, write_json,
                 write_reports)
from .kernels import KernelSpec
from .pipeline import (METHODS, InferenceConfig, Method, bandwidths, prepare_design,
                       solver_lambda)
from .simulation import (REP_COLUMNS, ModelSpec, SuiteConfig, generate, run_one,
                         run_replications)
from .solver import RandomizationSpec, draw_randomization, solve_randomized_penalized, solve_refit

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_inference_options(p):
    g = p.add_argument_group("inference")
    g.add_argument("--tau", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--lambda-scale", type=float)
    g.add_argument("--lambda-mode", choices=["mean", "literal"])
    g.add_argument("--kernel", choices=["gaussian", "logistic", "uniform", "epanechnikov"])
    g.add_argument("--bandwidth-mode", choices=["same", "formula", "explicit"])
    g.add_argument("--h-select", type=float)
    g.add_argument("--h-infer", type=float)
    g.add_argument("--delta2", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--split-fraction", type=float)
    g.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--penalize-intercept", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--tol-invert", type=float)


def _add_data_options(p):
    p.add_argument("--input", required=False, help="CSV file with a header row")
    p.add_argument("--response", help="response column name")
    p.add_argument("--drop", nargs="*", default=None, help="columns to ignore")
    p.add_argument("--one-hot", nargs="*", default=None, help="categorical columns")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selqr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"selqr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--output-dir", "-o", help="directory for artifacts (default: .)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("fit", parents=[common], help="randomized selection and refit only")
    _add_data_options(p)
    _add_inference_options(p)

    p = sub.add_parser("infer", parents=[common], help="selective intervals for a CSV dataset")
    _add_data_options(p)
    _add_inference_options(p)
    p.add_argument("--method", choices=["proposed", "naive", "splitting", "all"])

    p = sub.add_parser("simulate", parents=[common], help="one synthetic replication")
    p.add_argument("--model", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--rep", type=int)
    p.add_argument("--oracle-factor", type=int)
    p.add_argument("--save-data", action="store_true", help="also write the dataset as CSV")
    _add_inference_options(p)

    p = sub.add_parser("replicate", parents=[common], help="replication suite over a grid")
    p.add_argument("--models", type=int, nargs="+")
    p.add_argument("--signals", type=float, nargs="+")
    p.add_argument("--methods", nargs="+", choices=["Proposed", "Naive", "Splitting"])
    p.add_argument("--reps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--oracle-factor", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: $SELQR_WORKERS or 1)")
    _add_inference_options(p)
    return parser


DEFAULTS = {
    "output_dir": ".", "method": "all", "model": 1, "n": 400, "p": 50, "c": 1.0, "rep": 0,
    "oracle_factor": 100, "models": [1, 2, 3], "signals": [0.1, 0.5, 1.0],
    "methods": ["Proposed", "Naive", "Splitting"], "reps": 200, "drop": [], "one_hot": [],
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = {k: v for k, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(str(path))
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must contain a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def inference_config(opts: dict, **overrides) -> InferenceConfig:
    names = {f.name for f in fields(InferenceConfig)}
    kw = {k: v for k, v in opts.items() if k in names}
    kw.update(overrides)
    try:
        return InferenceConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(opts):
    if not opts.get("input"):
        raise UsageError("--input is required")
    if not opts.get("response"):
        raise UsageError("--response is required")
    return load_csv(opts["input"], opts["response"], opts.get("drop") or [],
                    opts.get("one_hot") or [])


def cmd_fit(opts) -> dict:
    data = _load(opts)
    cfg = inference_config(opts)
    design = prepare_design(data.X, cfg, data.names)
    n = design.X.shape[0]
    h, _ = bandwidths(cfg, n, design.p)
    lam = solver_lambda(cfg, n, design.p)
    omega = None
    if cfg.delta2 > 0:
        ss = np.random.SeedSequence(cfg.seed).spawn(2)[0]
        omega = draw_randomization(RandomizationSpec(cfg.delta2 * np.eye(design.X.shape[1])), n,
                                   np.random.default_rng(ss))
    spec = KernelSpec(cfg.kernel, h)
    sol = solve_randomized_penalized(design.X, data.Y, cfg.tau, spec, lam, omega, design.penalty)
    E = sol.active_set
    cols = [int(c) for c in E if c >= design.offset]
    refit = solve_refit(design.X[:, E], data.Y, cfg.tau, spec) if E.size else None
    rows = []
    for c in cols:
        k = c - design.offset
        pos = int(np.flatnonzero(E == c)[0])
        rows.append({"name": design.names[k], "j": k,
                     "penalized": float(sol.beta[c] / design.scale[k]),
                     "refit": float(refit.beta_E[pos] / design.scale[k])})
    payload = {"version": __version__, "command": "fit", "config": cfg.to_dict(),
               "n": n, "p": design.p, "lambda_solver": lam, "h_select": h,
               "kkt_residual": sol.kkt_residual, "converged": sol.converged,
               "selected": rows}
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(payload, out / "fit.json")
    return {"artifacts": [str(out / "fit.json")], "selected": [r["name"] for r in rows]}


def cmd_infer(opts) -> dict:
    data = _load(opts)
    cfg = inference_config(opts)
    which = [Method(m) for m in ("Proposed", "Naive", "Splitting")] if opts["method"] == "all" \
        else [Method(opts["method"].capitalize())]
    reports = [METHODS[m](data.X, data.Y, config=cfg, names=data.names) for m in which]
    paths = write_reports(reports, opts["output_dir"], "report",
                          {"input": str(opts["input"]), "response": data.response,
                           "rows_dropped": data.n_dropped})
    return {"artifacts": list(paths.values()),
            "selected": {r.method.value: [row.name for row in r.rows] for r in reports}}


def _suite(opts, **over) -> SuiteConfig:
    cfg = inference_config(opts, **({"standardize": False} if opts.get("standardize") is None else {}))
    try:
        return SuiteConfig(models=tuple(over.get("models", opts["models"])),
                           signals=tuple(over.get("signals", opts["signals"])),
                           methods=tuple(opts["methods"]), reps=over.get("reps", opts["reps"]),
                           n=opts["n"], p=opts["p"], tau=cfg.tau, seed=cfg.seed,
                           oracle_factor=opts["oracle_factor"], inference=cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate(opts) -> dict:
    suite = _suite(opts, models=[opts["model"]], signals=[opts["c"]], reps=opts["rep"] + 1)
    rep_rows, coord_rows = run_one(suite, opts["model"], 0, opts["rep"])
    import pandas as pd
    from .simulation import COORD_COLUMNS
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(pd.DataFrame(coord_rows, columns=COORD_COLUMNS), out / "simulate_coords.csv")
    write_json({"version": __version__, "command": "simulate", "suite": suite.to_dict(),
                "rep": opts["rep"], "metrics": pd.DataFrame(rep_rows, columns=REP_COLUMNS).to_dict("records")},
               out / "simulate.json")
    arts = [str(out / "simulate_coords.csv"), str(out / "simulate.json")]
    if opts.get("save_data"):
        from .simulation import replication_streams
        spec = ModelSpec(opts["model"], opts["n"], opts["p"], opts["c"], suite.tau)
        data = generate(spec, replication_streams(suite.seed, opts["model"], 0, opts["rep"])[0])
        df = pd.DataFrame(data.X, columns=data.names)
        df.insert(0, "y", data.Y)
        write_csv(df, out / "simulate_data.csv")
        arts.append(str(out / "simulate_data.csv"))
    return {"artifacts": arts}


def cmd_replicate(opts) -> dict:
    suite = _suite(opts)
    res = run_replications(suite, workers=opts.get("workers"))
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(res.reps, out / "replications.csv")
    write_csv(res.coords, out / "coordinates.csv")
    write_json({"version": __version__, "command": "replicate", "suite": res.config,
                "failures": int((res.reps.status != "ok").sum()),
                "summary": res.summary.to_dict("records")}, out / "summary.json")
    return {"artifacts": [str(out / "replications.csv"), str(out / "coordinates.csv"),
                          str(out / "summary.json")]}


COMMANDS = {"fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate,
            "replicate": cmd_replicate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(dumps(error_payload(exc, EXIT_USAGE)), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:           # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            result = COMMANDS[args.command](opts)
    except (UsageError, FileNotFoundError, PermissionError, IsADirectoryError, DataError) as exc:
        ctx = {"path": str(exc.filename if getattr(exc, "filename", None) else exc)} \
            if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)) else {}
        print(dumps(error_payload(exc, EXIT_USAGE, command=args.command, **ctx)), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(dumps(error_payload(exc, EXIT_COMPUTE, command=args.command)), file=sys.stderr)
        return EXIT_COMPUTE
    print(dumps({"status": "ok", "command": args.command, "version": __version__, **result}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
