"""Command-line entry point.

Every run writes its artifacts plus ``manifest.json`` under ``--out``.
Failures print a JSON object to stderr and exit with a code from
:data:`EXIT_CODES`.  The default worker count comes from the
``CORRFRAIL_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .errors import (
    BudgetExceededError,
    ConvergenceError,
    CorrFrailError,
    RowValidationError,
    SchemaError,
)

THREADS_ENV = "CORRFRAIL_THREADS"

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "input": 3,
    "schema": 4,
    "model": 5,
    "convergence": 6,
    "budget": 7,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_jobs():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _csv_list(s):
    return tuple(x.strip() for x in s.split(",") if x.strip()) if s else ()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Run:
    """Collects outputs of one invocation and writes the manifest last."""

    def __init__(self, args):
        self.args = args
        self.out = args.out
        self.outputs = []
        self.inputs = {}
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def add_input(self, path):
        self.inputs[path] = _sha256(path)

    def write_json(self, name, doc):
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.outputs.append(p)
        return p

    def record(self, paths):
        self.outputs.extend(paths)

    def manifest(self, wall):
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        doc = {
            "subcommand": self.args.command,
            "config": cfg,
            "inputs": self.inputs,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "outputs": {os.path.relpath(p, self.out): _sha256(p) for p in self.outputs},
            "wall_clock_seconds": wall,
        }
        p = self.path("manifest.json")
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p


# ------------------------------------------------------------------ loaders


def _load(run, args):
    from .dataset import CsvSchema, load_csv

    if not os.path.isfile(args.data):
        raise FileNotFoundError(f"cannot read {args.data}")
    run.add_input(args.data)
    schema = CsvSchema(
        time_col=args.time_col,
        status_col=args.status_col,
        covariates=_csv_list(args.covariates),
        genes=_csv_list(args.genes),
        cluster_col=args.cluster_col,
        id_col=args.id_col,
        num_causes=args.num_causes,
    )
    return load_csv(args.data, schema)


def _sim_config(run, args):
    from .simulate import PRESETS, load_scenario

    if args.scenario:
        run.add_input(args.scenario)
        cfg = load_scenario(args.scenario)
    else:
        cfg = PRESETS[args.preset]()
    return cfg.replace(seed=args.seed)


def _model_config(args):
    from .threshold import ModelConfig

    return ModelConfig(
        cause=args.cause,
        covariates=_csv_list(args.covariates) or None,
        grid=args.grid,
        points=args.points,
        min_fraction=args.min_fraction,
    )


# -------------------------------------------------------------- subcommands


def cmd_simulate(run, args):
    from .dataset import save_csv
    from .simulate import simulate_dataset

    cfg = _sim_config(run, args)
    data = simulate_dataset(cfg)
    p = run.path("data.csv")
    save_csv(data, p, cluster_col="cluster")
    run.record([p])
    run.write_json("config.json", cfg.to_dict())
    return {"n": data.n, "events": np.bincount(data.status, minlength=cfg.J + 1).tolist(), "data": p}


def cmd_fit_cox(run, args):
    from .coxph import fit_cox

    data = _load(run, args)
    causes = [args.cause] if args.cause else range(1, data.num_causes + 1)
    covs = _csv_list(args.covariates) or None
    fits = [fit_cox(data, j, covs).to_dict() for j in causes]
    run.write_json("cox.json", {"fits": fits})
    return {"fits": fits}


def cmd_fit_frailty(run, args):
    from .frailty import FrailtyOptions, fit_correlated_frailty

    data = _load(run, args)
    opts = FrailtyOptions(bootstrap_replicates=args.bootstrap, seed=args.seed)
    fit = fit_correlated_frailty(data, _csv_list(args.covariates) or None, opts)
    doc = fit.to_dict()
    run.write_json("frailty.json", doc)
    return doc


def cmd_fit_frailty_independent(run, args):
    from .shared_frailty import fit_shared_frailty

    data = _load(run, args)
    covs = _csv_list(args.covariates) or None
    fits = [fit_shared_frailty(data, args.distribution, None, j, covs).to_dict()
            for j in range(1, data.num_causes + 1)]
    run.write_json("independent.json", {"fits": fits})
    return {"fits": fits}


def cmd_combine_p(run, args):
    from .pcombine import MonteCarloConfig, monte_carlo_pvalue

    res = monte_carlo_pvalue(args.pvalues, args.method, MonteCarloConfig(args.m, args.seed, args.n_jobs))
    doc = res.to_dict()
    run.write_json("combine.json", doc)
    return doc


def cmd_cif(run, args):
    from .dataset import cumulative_incidence
    from .report import emit_report, write_csv

    data = _load(run, args)
    run.record(emit_report(data, run.out, "cif"))
    for j in range(1, data.num_causes + 1):
        f = cumulative_incidence(data, j)
        rows = [[float(t), float(v)] for t, v in zip(f.breakpoints, f.values)]
        run.record([write_csv(run.path(f"cif_cause{j}.csv"), ("time", "value"), rows)])
    return {"causes": data.num_causes, "outputs": list(run.outputs)}


def cmd_threshold_scan(run, args):
    from .report import emit_report
    from .threshold import pvalue_variance_correlation, scan_single_gene

    data = _load(run, args)
    crit = args.criterion.replace("-", "_")
    scan = scan_single_gene(data, args.gene, crit, _model_config(args), with_variance=args.with_variance)
    run.record(emit_report(scan, run.out, "scan"))
    doc = {
        "gene": scan.gene,
        "criterion": scan.criterion,
        "best_cutoff": scan.best_cutoff,
        "best_position": scan.best_index + 1,
        "best_by_p": None if scan.best_by_p is None else float(scan.cutoffs[scan.best_by_p]),
        "best_by_variance": None if scan.best_by_variance is None else float(scan.cutoffs[scan.best_by_variance]),
        "n_tests": scan.n_tests,
        "excluded": [list(e) for e in scan.excluded],
    }
    if scan.frailty_variances is not None:
        try:
            doc["spearman_p_vs_fvar"] = pvalue_variance_correlation(scan)
        except CorrFrailError as exc:
            doc["spearman_p_vs_fvar"] = None
            doc["spearman_note"] = str(exc)
    run.write_json("scan.json", doc)
    return doc


def cmd_threshold_stepwise(run, args):
    from .report import APPENDIX_HEADER, appendix_rows, emit_report, write_csv
    from .threshold import all_orderings, consistency_report, stepwise_multi_gene, validate_partitions

    data = _load(run, args)
    genes = _csv_list(args.genes) or tuple(data.genes)
    starts = _csv_list(args.starts)
    cfg = _model_config(args)
    if args.all_orders:
        res = all_orderings(data, genes, starts, cfg, budget=args.budget)
        rows = list(res.rows)
    else:
        rows = [stepwise_multi_gene(data, genes, s, cfg) for s in starts]
    run.record(emit_report(rows, run.out, "table5", genes=genes))
    doc = {"consistency": consistency_report(rows), "runs": len(rows)}
    if args.validate != "none":
        pairs = sorted({(g, c) for r in rows for g, c in zip(r.ordering, r.cutoffs)})
        parts = {}
        for g, c in pairs:
            parts[(g, c)] = validate_partitions(data, {g: c}, args.validate, cfg)[0]
        run.record([write_csv(run.path("appendix.csv"), APPENDIX_HEADER, appendix_rows(rows, parts))])
    run.write_json("stepwise.json", doc)
    return doc


def cmd_validate_partitions(run, args):
    from .report import emit_report
    from .threshold import validate_partitions

    data = _load(run, args)
    cut = {}
    for item in _csv_list(args.cutoffs):
        g, _, v = item.partition("=")
        cut[g] = float(v)
    parts = validate_partitions(data, cut, args.distribution, _model_config(args))
    run.record(emit_report(parts, run.out, "partitions"))
    return {"partitions": len(parts)}


def cmd_replicate_study(run, args):
    from .simulate import replicate_study

    cfg = _sim_config(run, args)
    study = replicate_study(cfg, args.reps, _csv_list(args.estimators), seed=args.seed, n_jobs=args.n_jobs)
    run.record(study.write(run.out))
    return {"replicates": study.R, "failures": len(study.failures)}


# ------------------------------------------------------------------ parser


def _data_args(p):
    p.add_argument("data", help="input CSV")
    p.add_argument("--time-col", default="time")
    p.add_argument("--status-col", default="status")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--genes", default="", help="comma-separated gene-expression columns")
    p.add_argument("--cluster-col", default=None)
    p.add_argument("--id-col", default=None)
    p.add_argument("--num-causes", type=int, default=None)


def _sim_args(p):
    from .simulate import PRESETS

    p.add_argument("--preset", choices=sorted(PRESETS), default="paper-sec3")
    p.add_argument("--scenario", default=None, help="key = value scenario file (overrides --preset)")


def _scan_args(p):
    p.add_argument("--cause", type=int, default=1)
    p.add_argument("--grid", choices=("percentile", "equal"), default="percentile")
    p.add_argument("--points", type=int, default=99)
    p.add_argument("--min-fraction", type=float, default=0.10)


def build_parser():
    parser = _Parser(prog="corrfrail", description="Competing-risks frailty models and cutpoint search.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.subcommands = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        parser.subcommands[name] = p
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n-jobs", type=int, default=_default_jobs())
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "simulate a clustered competing-risks dataset")
    _sim_args(p)

    p = add("fit-cox", cmd_fit_cox, "cause-specific Cox fits")
    _data_args(p)
    p.add_argument("--cause", type=int, default=None)

    p = add("fit-frailty", cmd_fit_frailty, "correlated gamma frailty fit")
    _data_args(p)
    p.add_argument("--bootstrap", type=int, default=0, help="cluster-bootstrap replicates")

    p = add("fit-frailty-independent", cmd_fit_frailty_independent, "one shared-frailty fit per cause")
    _data_args(p)
    p.add_argument("--distribution", choices=("gamma", "lognormal", "gaussian"), default="gamma")

    p = add("combine-p", cmd_combine_p, "Monte-Carlo combination of p-values")
    p.add_argument("--method", default="fisher")
    p.add_argument("--m", type=int, default=100_000, help="Monte-Carlo replicates")
    p.add_argument("pvalues", type=float, nargs="+")

    p = add("cif", cmd_cif, "Aalen-Johansen cumulative incidence curves")
    _data_args(p)

    p = add("threshold-scan", cmd_threshold_scan, "single-gene cutoff scan")
    _data_args(p)
    _scan_args(p)
    p.add_argument("--gene", required=True)
    p.add_argument("--criterion", choices=("min-p", "max-fvar", "min-fvar"), default="min-p")
    p.add_argument("--with-variance", action="store_true", help="also record frailty variances")

    p = add("threshold-stepwise", cmd_threshold_stepwise, "stepwise multi-gene cutoff search")
    _data_args(p)
    _scan_args(p)
    p.add_argument("--starts", default="Q1,Q2,Q3")
    p.add_argument("--all-orders", action="store_true")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--validate", choices=("none", "gamma", "lognormal"), default="gamma")

    p = add("validate-partitions", cmd_validate_partitions, "arm-wise shared frailty variances")
    _data_args(p)
    _scan_args(p)
    p.add_argument("--cutoffs", required=True, help="GENE=VALUE,...")
    p.add_argument("--distribution", choices=("gamma", "lognormal", "gaussian"), default="gamma")

    p = add("replicate-study", cmd_replicate_study, "simulation study of estimator recovery")
    _sim_args(p)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--estimators", default="correlated,independent")
    return parser


def argv_from_manifest(manifest, out=None):
    """Command line that replays the run recorded in ``manifest``.

    ``manifest`` is the parsed ``manifest.json`` (or a path to it); ``out``
    redirects the outputs.
    """
    if not isinstance(manifest, dict):
        with open(manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    cfg = dict(manifest["config"])
    if out is not None:
        cfg["out"] = str(out)
    sub = build_parser().subcommands[manifest["subcommand"]]
    argv, positional = [manifest["subcommand"]], []
    for action in sub._actions:
        if action.dest not in cfg or action.dest == "help":
            continue
        value = cfg[action.dest]
        if not action.option_strings:
            positional += [str(v) for v in value] if isinstance(value, list) else [str(value)]
        elif isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(action.option_strings[-1])
        elif value is not None:
            argv += [action.option_strings[-1], str(value)]
    return argv + positional


def _fail(kind, exc):
    doc = {"error": type(exc).__name__, "kind": kind, "message": str(exc), "exit_code": EXIT_CODES[kind]}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None):
    """Run one subcommand; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc)
    start = time.perf_counter()
    try:
        run = Run(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            doc = args.func(run, args)
        run.manifest(round(time.perf_counter() - start, 3))
    except (SchemaError, RowValidationError) as exc:
        return _fail("schema", exc)
    except OSError as exc:
        return _fail("input", exc)
    except BudgetExceededError as exc:
        return _fail("budget", exc)
    except ConvergenceError as exc:
        return _fail("convergence", exc)
    except (CorrFrailError, ValueError, KeyError, ArithmeticError) as exc:
        return _fail("model", exc)
    print(json.dumps(_jsonable(doc), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
