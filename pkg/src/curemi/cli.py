"""Command-line entry point: ``curemi <command> [options]``.

Commands
--------
fit             fit the cure model to a CSV and write ``fit_report.csv``
impute          write K completed datasets ``imputed_kNN.csv``
pool            fit each completed dataset and combine by Rubin's rules
simulate        draw one replicate of a simulation scenario
study           run a simulation study and write long and aggregated CSVs
check-followup  sufficient follow-up interval check

Every command writes ``manifest.json`` into its output directory. Options
may also come from a YAML file given with ``--config``; explicit flags take
precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import time
import warnings
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import yaml

from . import rng as rngmod
from .cure import bootstrap_se, fit_cure_em, write_fit_report
from .data import (load_csv, load_model_spec, load_schema, validate, write_csv,
                   write_schema)
from .diagnostics import followup_interval_check
from .errors import CureMIError, MissingDataPresent
from .imputation import ImputationConfig, run_chained_equations
from .pooling import pool_fits, write_pooled_report
from .simulation import (METHODS, ScenarioConfig, config_dict, get_scenario, run_study,
                         simulate, write_study)

log = logging.getLogger("curemi")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# Options that change how a run executes but not what it computes; they are
# left out of the manifest so outputs stay identical across worker counts
# and output locations.
EXECUTION_ONLY = frozenset({"func", "out", "workers", "verbose", "timestamps"})


class Manifest:
    """Run record written as ``manifest.json`` next to the outputs."""

    def __init__(self, command, args, seed, timestamps=False):
        config = {k: v for k, v in vars(args).items() if k not in EXECUTION_ONLY}
        self.doc = {"command": command, "config": _jsonable(config), "seed": seed,
                    "version": _version(), "diagnostics": {}, "outputs": []}
        self.timestamps = timestamps
        if timestamps:
            self.doc["started"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def output(self, path):
        self.doc["outputs"].append(Path(path).name)

    def note(self, key, value):
        self.doc["diagnostics"][key] = _jsonable(value)

    def write(self, outdir: Path):
        if self.timestamps:
            self.doc["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path = outdir / "manifest.json"
        self.doc["outputs"].append(path.name)
        path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if hasattr(v, "tolist"):
        return v.tolist()
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    return str(v)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    schema = load_schema(args.schema)
    spec = load_model_spec(args.model or args.schema, schema)
    return load_csv(args.data, schema), schema, spec


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, manifest):
    ds, _, spec = _load(args)
    report = validate(ds, spec)
    manifest.note("validation", report.__dict__)
    if ds.missing_in(spec.columns).any():
        if not args.allow_complete_case:
            raise MissingDataPresent(
                f"{int(ds.missing_in(spec.columns).sum())} rows have missing model covariates; "
                "impute first or pass --allow-complete-case")
        ds = ds.subset(~ds.missing_in(spec.columns))
        manifest.note("complete_case_rows", ds.n)
    fit = fit_cure_em(ds, spec, tol=args.tol, max_iter=args.max_iter)
    if args.bootstrap:
        se, failed = bootstrap_se(ds, spec, args.bootstrap,
                                  rngmod.derive_seed(args.seed, rngmod.TAG_BOOTSTRAP),
                                  workers=args.workers)
        fit = replace(fit, se=se)
        manifest.note("bootstrap_failed", failed)
    manifest.note("em", {"iterations": fit.iterations, "converged": fit.converged,
                         "loglik": fit.loglik})
    out = _outdir(args) / "fit_report.csv"
    write_fit_report(fit, out)
    manifest.output(out)
    return out


def cmd_impute(args, manifest):
    ds, schema, spec = _load(args)
    config = ImputationConfig(method=args.method, n_imputations=args.k,
                              n_iterations=args.iters, mh_burn_in=args.mh_burn,
                              mh_thin=args.mh_thin, mh_proposal_sd=args.mh_sd, seed=args.seed)
    run = run_chained_equations(ds, spec, config, workers=args.workers)
    outdir = _outdir(args)
    for k, completed in enumerate(run.datasets, start=1):
        path = outdir / f"imputed_k{k:02d}.csv"
        write_csv(completed, path)
        manifest.output(path)
    schema_path = outdir / "schema.yaml"
    write_schema(schema_path, schema, spec)
    manifest.output(schema_path)
    manifest.note("init_source", run.init_source)
    manifest.note("failed_datasets", run.failed)
    manifest.note("per_dataset", run.diagnostics)
    return outdir


def cmd_pool(args, manifest):
    schema = load_schema(args.schema)
    spec = load_model_spec(args.model or args.schema, schema)
    paths = sorted(Path(p) for p in args.datasets)
    fits = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for p in paths:
            fits.append(fit_cure_em(load_csv(p, schema), spec))
    pe = pool_fits(fits)
    manifest.note("inputs", [str(p) for p in paths])
    manifest.note("converged", [f.converged for f in fits])
    out = _outdir(args) / "pooled_report.csv"
    write_pooled_report(pe, out)
    manifest.output(out)
    return out


def _scenario(args) -> ScenarioConfig:
    name = args.scenario
    if Path(name).suffix in (".yaml", ".yml") and Path(name).exists():
        doc = yaml.safe_load(Path(name).read_text(encoding="utf-8")) or {}
        base = get_scenario(doc.pop("base")) if "base" in doc else ScenarioConfig()
        cfg = replace(base, **doc)
    else:
        cfg = get_scenario(name)
    return replace(cfg, seed=args.seed, **({"n": args.n} if args.n else {}))


def cmd_simulate(args, manifest):
    cfg = _scenario(args)
    full, amp, latent = simulate(cfg, args.replicate)
    outdir = _outdir(args)
    paths = [outdir / "data.csv", outdir / "data_full.csv", outdir / "schema.yaml"]
    write_csv(amp, paths[0])
    write_csv(full, paths[1])
    write_schema(paths[2], list(amp.columns), cfg.model_spec)
    for p in paths:
        manifest.output(p)
    manifest.note("scenario", config_dict(cfg))
    manifest.note("achieved_correlation", latent.correlation)
    manifest.note("cure_rate", float(1 - latent.G.mean()))
    manifest.note("validation", validate(amp, cfg.model_spec).__dict__)
    return outdir


def cmd_study(args, manifest):
    cfg = _scenario(args)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    icfg = ImputationConfig(n_imputations=args.k, n_iterations=args.iters,
                            mh_burn_in=args.mh_burn, mh_thin=args.mh_thin,
                            mh_proposal_sd=args.mh_sd)
    result = run_study(cfg, args.b, methods, icfg, workers=args.workers)
    outdir = _outdir(args)
    long_path, metrics_path = outdir / "study_long.csv", outdir / "study_metrics.csv"
    write_study(result, long_path, metrics_path)
    manifest.output(long_path)
    manifest.output(metrics_path)
    manifest.note("scenario", config_dict(cfg))
    manifest.note("failures", result.metrics.failures)
    return metrics_path


def cmd_check_followup(args, manifest):
    ds, _, _ = _load(args)
    strata = [None]
    if args.stratify:
        j = ds.index(args.stratify)
        obs = ds.covariates[~ds.missing_mask[:, j], j]
        strata = [(args.stratify, float(v)) for v in sorted(set(obs.tolist()))]
    rows = []
    for s in strata:
        check = followup_interval_check(ds, s)
        print(check.report())
        rows.append(check.as_row())
    manifest.note("followup", rows)
    return None


# ---------------------------------------------------------------------------
# parser


def _add_common(p, *, data=True):
    p.add_argument("--config", help="YAML file of option defaults")
    p.add_argument("--seed", type=int, help="master seed (drawn from the OS if omitted)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timestamps", action="store_true",
                   help="record wall-clock times in the manifest (breaks byte identity)")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("data", help="input CSV with time, status and covariate columns")
        p.add_argument("--schema", required=True, help="YAML schema file")
        p.add_argument("--model", help="YAML file with a model mapping (default: the schema)")


def _add_imputation(p):
    p.add_argument("--k", type=int, default=10, help="number of imputed datasets")
    p.add_argument("--iters", type=int, default=10, help="chained-equation iterations")
    p.add_argument("--mh-burn", type=int, default=500)
    p.add_argument("--mh-thin", type=int, default=100)
    p.add_argument("--mh-sd", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curemi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the cure model")
    _add_common(p)
    p.add_argument("--allow-complete-case", action="store_true")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=500)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="multiple imputation of missing covariates")
    _add_common(p)
    p.add_argument("--method", choices=("exact", "approximate"), default="exact")
    _add_imputation(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("pool", help="fit completed datasets and pool")
    _add_common(p, data=False)
    p.add_argument("datasets", nargs="+", help="completed CSV files")
    p.add_argument("--schema", required=True)
    p.add_argument("--model")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("simulate", help="draw one replicate of a scenario")
    _add_common(p, data=False)
    p.add_argument("scenario", help="preset A-F or a YAML scenario file")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a simulation study")
    _add_common(p, data=False)
    p.add_argument("scenario", help="preset A-F or a YAML scenario file")
    p.add_argument("--b", type=int, default=200, help="number of replicates")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--n", type=int)
    _add_imputation(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("check-followup", help="sufficient follow-up interval check")
    _add_common(p)
    p.add_argument("--stratify", help="binary or categorical column to stratify by")
    p.set_defaults(func=cmd_check_followup)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(k.replace("-", "_") for k in doc) - known
    if unknown:
        raise ValueError(f"unknown options in {args.config}: {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.seed is None:
            args.seed = secrets.randbits(63)
        manifest = Manifest(args.command, args, args.seed, args.timestamps)
        args.func(args, manifest)
        manifest.write(_outdir(args))
    except (CureMIError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
