"""Command-line entry point (``intsdr``).

Machine-readable JSON goes to stdout (or ``--output``); diagnostics go to
stderr.  Exit codes: 0 success, 1 numerical failure, 2 usage or validation
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .exceptions import NumericalError

DEFAULTS = {
    "basis_dim": 8,
    "basis_dim_multi": 6,
    "degree": 3,
    "penalty_order": 2,
    "tol": 1e-6,
    "max_iter": 50,
    "lambda_grid": {"lo": 1e-6, "hi": 1e6, "size": 40},
    "q_max": 3,
    "ratio": 5,
    "reps": 200,
    "seed": 0,
}


class UsageError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _emit(payload: dict, args) -> None:
    payload = {**payload, "defaults": DEFAULTS}
    text = json.dumps(payload, indent=2, default=_jsonable)
    if getattr(args, "output", None):
        Path(args.output).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


def _load(args, kind="discrete"):
    from .data import ColumnSchema, load_csv

    for flag in ("input", "outcome", "treatment", "covariates"):
        if not getattr(args, flag, None):
            raise UsageError(f"--{flag} is required")
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
    schema = ColumnSchema(outcome=args.outcome, treatment=args.treatment, covariates=covs,
                          treatment_kind=kind)
    probs = _floats(args.probs) if getattr(args, "probs", None) else None
    if not Path(args.input).is_file():
        raise UsageError(f"input file not found: {args.input}")
    return load_csv(args.input, schema, pi=probs)


def _config(args):
    from .simml import FitConfig

    return FitConfig(d=args.basis_dim, tol=args.tol, max_iter=args.max_iter, seed=args.seed,
                     main_effect=args.main_effect)


def _n_jobs(args) -> int:
    return -1 if args.threads in (None, 0) else int(args.threads)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit_linear(args) -> int:
    from .data import preprocess
    from .linear import fit_linear_gem

    ds = _load(args)
    prepared, report = preprocess(ds)
    fit = fit_linear_gem(prepared)
    _emit({"command": "fit-linear", "n": ds.n, "p": ds.p, "L": ds.n_levels,
           "pi_source": ds.pi_source, "covariates": list(ds.covariate_names),
           "label_map": ds.label_map, "fit": fit.to_dict(), "preprocess": report.to_dict()}, args)
    return 0


def cmd_fit_simml(args) -> int:
    from .data import preprocess
    from .simml import fit_simml

    ds = _load(args)
    prepared, report = preprocess(ds)
    fit = fit_simml(prepared, _config(args))
    if args.emit_curves:
        u = np.linspace(fit.basis.lo, fit.basis.hi, 101)
        G = fit.links.values(u)
        _write_rows(args.emit_curves, ["u"] + [f"g{a}" for a in range(1, ds.n_levels + 1)],
                    np.column_stack([u, G]).tolist())
    _emit({"command": "fit-simml", "n": ds.n, "p": ds.p, "L": ds.n_levels,
           "covariates": list(ds.covariate_names), "fit": fit.to_dict(),
           "preprocess": report.to_dict()}, args)
    return 0


def cmd_fit_simsl(args) -> int:
    from .data import preprocess
    from .simsl import fit_simsl

    ds = _load(args, kind="continuous")
    prepared, report = preprocess(ds)
    fit = fit_simsl(prepared, _config(args))
    if not fit.index_identifiable:
        print("warning: surface is flat in the index; direction not identified", file=sys.stderr)
    if args.emit_curves:
        u = np.linspace(fit.index_basis.lo, fit.index_basis.hi, 41)
        a = np.linspace(fit.a_range[0], fit.a_range[1], 41)
        uu, aa = (m.ravel() for m in np.meshgrid(u, a, indexing="ij"))
        from .splines import bspline_design, tensor_design

        g = tensor_design(bspline_design(fit.index_basis, uu),
                          bspline_design(fit.dose_basis, aa) @ fit.Zbar) @ fit.theta_star
        _write_rows(args.emit_curves, ["u", "a", "g"], np.column_stack([uu, aa, g]).tolist())
    _emit({"command": "fit-simsl", "n": ds.n, "p": ds.p,
           "covariates": list(ds.covariate_names), "fit": fit.to_dict(),
           "preprocess": report.to_dict()}, args)
    return 0


def cmd_select_dim(args) -> int:
    from .data import preprocess
    from .simml import FitConfig
    from .stiefel import select_dimension

    ds = _load(args)
    prepared, report = preprocess(ds)
    cfg = FitConfig(d=args.basis_dim, seed=args.seed, main_effect=args.main_effect)
    q_max = min(args.qmax, ds.p - 1)
    if q_max < args.qmax:
        print(f"warning: q_max lowered to p - 1 = {q_max}", file=sys.stderr)
    sel = select_dimension(prepared, q_max, cfg, n_jobs=_n_jobs(args))
    print(sel.table(), file=sys.stderr)
    out = sel.to_dict()
    out["table"] = [{"q": q, "aic": sel.aic.get(q), "selected": q == sel.selected,
                     "error": sel.errors.get(q)} for q in sel.candidates]
    _emit({"command": "select-dim", "n": ds.n, "p": ds.p, "L": ds.n_levels,
           "selection": out, "preprocess": report.to_dict()}, args)
    return 0


def cmd_evaluate(args) -> int:
    from .itr import ESTIMATORS, split_evaluate

    if args.estimator not in ESTIMATORS and args.estimator != "random":
        raise UsageError(f"unknown estimator {args.estimator!r}; choose from "
                         f"{sorted(ESTIMATORS) + ['random']}")
    ds = _load(args)
    spec = {"name": args.estimator, "q": args.dim, "d": args.basis_dim,
            "main_effect": args.main_effect}
    report = split_evaluate(ds, spec, ratio=args.ratio, reps=args.reps, seed=args.seed,
                            n_jobs=_n_jobs(args))
    print(f"{args.estimator}: {report.formatted()}", file=sys.stderr)
    _emit({"command": "evaluate", "n": ds.n, "report": report.to_dict()}, args)
    return 0


def cmd_simulate(args) -> int:
    from .simulate import _load_toml, generate, spec_from_dict

    if not args.spec:
        raise UsageError("--spec is required")
    raw = _load_toml(args.spec)
    raw = raw.get("generator", raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.auto_center:
        raw["auto_center"] = True
    spec = spec_from_dict(raw)
    ds, truth = generate(spec)
    out_dir = Path(args.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"x{j + 1}" for j in range(ds.p)]
    A = ds.A.astype(int) if ds.discrete else ds.A
    rows = [[repr(float(y)), str(a) if ds.discrete else repr(float(a)), *map(lambda v: repr(float(v)), x)]
            for y, a, x in zip(ds.Y, A, ds.X)]
    data_path, truth_path = out_dir / "data.csv", out_dir / "truth.json"
    _write_rows(data_path, ["y", "a", *names], rows)
    truth_path.write_text(json.dumps(truth.to_dict(), indent=2, default=_jsonable) + "\n")
    payload = {"command": "simulate", "n": ds.n, "p": ds.p, "data": str(data_path),
               "truth": str(truth_path), "spec": spec.to_dict()}
    sys.stdout.write(json.dumps({**payload, "defaults": DEFAULTS}, indent=2, default=_jsonable) + "\n")
    return 0


def cmd_experiment(args) -> int:
    from .simulate import run_experiment

    if not args.config:
        raise UsageError("--config is required")
    report = run_experiment(args.config, args.output_dir)
    failed = sum(1 for c in report["cells"] if c["error"])
    if failed:
        print(f"warning: {failed} cells failed", file=sys.stderr)
    _emit({"command": "experiment", "summary": report["summary"],
           "cells": len(report["cells"]), "failed_cells": failed}, args)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _data_flags(p):
    p.add_argument("--input", help="CSV file with a header row")
    p.add_argument("--outcome", help="outcome column")
    p.add_argument("--treatment", help="treatment column")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--probs", help="known treatment probabilities, comma-separated")


def _fit_flags(p):
    p.add_argument("--basis-dim", type=int, default=DEFAULTS["basis_dim"])
    p.add_argument("--tol", type=float, default=DEFAULTS["tol"])
    p.add_argument("--max-iter", type=int, default=DEFAULTS["max_iter"])
    p.add_argument("--main-effect", choices=["none", "additive"], default="none",
                   help="subtract an additive fit of E[Y|X] before fitting")


def _common(p):
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: all cores; 1 = serial)")
    p.add_argument("--output", help="write JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intsdr",
                                     description="Dimension reduction for treatment interactions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-linear", help="linear dispersion-matrix fit")
    _data_flags(p)
    _common(p)
    p.set_defaults(func=cmd_fit_linear)

    for name, func in (("fit-simml", cmd_fit_simml), ("fit-simsl", cmd_fit_simsl)):
        p = sub.add_parser(name, help=f"{name[4:]} single-index fit")
        _data_flags(p)
        _fit_flags(p)
        _common(p)
        p.add_argument("--emit-curves", metavar="CSV", help="write a fitted-link grid as CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("select-dim", help="choose the number of indices by AIC")
    _data_flags(p)
    _fit_flags(p)
    _common(p)
    p.add_argument("--qmax", type=int, default=DEFAULTS["q_max"])
    p.set_defaults(func=cmd_select_dim)

    p = sub.add_parser("evaluate", help="repeated split value estimation")
    _data_flags(p)
    _fit_flags(p)
    _common(p)
    p.add_argument("--estimator", default="simml")
    p.add_argument("--dim", type=int, default=1, help="number of indices for --estimator multi")
    p.add_argument("--ratio", type=float, default=DEFAULTS["ratio"])
    p.add_argument("--reps", type=int, default=DEFAULTS["reps"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="draw a dataset from a TOML generator spec")
    p.add_argument("--spec", help="TOML generator spec")
    p.add_argument("--seed", type=int, default=None, help="override the generator seed")
    p.add_argument("--auto-center", action="store_true",
                   help="center links that do not average to zero")
    p.add_argument("--output-dir", "--output", dest="output_dir",
                   help="directory for data.csv and truth.json (default: .)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a TOML simulation experiment")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--output-dir", help="directory for report.json and cells.csv")
    p.add_argument("--output", help="write the summary JSON here instead of stdout")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        warnings.showwarning = lambda msg, cat, *a, **k: print(
            f"warning: {msg}", file=sys.stderr)
        try:
            return args.func(args)
        except NumericalError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2


if __name__ == "__main__":
    sys.exit(main())
