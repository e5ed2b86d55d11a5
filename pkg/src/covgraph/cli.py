"""Command-line entry point: ``covgraph {fit,simulate,eval,rerun,experiment}``.

The only environment variable read is ``COVGRAPH_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from covgraph.cli_io import (
    EXIT_ERROR,
    EXIT_OK,
    EXIT_USAGE,
    FitConfig,
    config_from_manifest,
    parse_anchors,
    read_grid_file,
    run_eval,
    run_fit,
    run_simulate,
)
from covgraph.errors import CovgraphError
from covgraph.experiment import run_experiment
from covgraph.simulation import KINDS, SimSetting

LOG_ENV = "COVGRAPH_LOG_LEVEL"


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _setting_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("kind", choices=KINDS, metavar="KIND", help=f"one of: {', '.join(KINDS)}")
    p.add_argument("--p", type=int, default=10, help="nominal dimension (samples p+1 variables)")
    p.add_argument("--ambient", type=int, default=None, help="sampled dimension, overrides p+1")
    p.add_argument("--c", type=float, default=15.0, help="signal strength of discrete settings")
    p.add_argument("--n1", type=int, default=50)
    p.add_argument("--n2", type=int, default=50)
    p.add_argument("--n-per-group", type=int, default=None)
    p.add_argument("--fraction", type=float, default=0.05, help="contaminated share of rows")
    p.add_argument("--df", type=float, default=6.0, help="degrees of freedom for t-noise")
    p.add_argument("--base", default="discrete-independent", choices=KINDS,
                   help="base setting for contaminated / t-noise")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--trials", type=_positive_int, default=1)


def _setting(ns: argparse.Namespace) -> SimSetting:
    return SimSetting(
        kind=ns.kind, p=ns.p, ambient=ns.ambient, c=ns.c, n1=ns.n1, n2=ns.n2,
        n_per_group=ns.n_per_group, fraction=ns.fraction, df=ns.df, base=ns.base, seed=ns.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covgraph",
        description="Covariate-dependent graph estimation by weighted pseudo-likelihood.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate per-individual graphs from CSV data")
    fit.add_argument("--data", required=True, help="n x p headerless CSV")
    fit.add_argument("--covariates", help="n x d headerless CSV; omit for covariate-free mode")
    fit.add_argument("--out", required=True, help="output directory (created if missing)")
    fit.add_argument("--threshold", type=float, default=0.5)
    bw = fit.add_mutually_exclusive_group()
    bw.add_argument("--tau", type=float, help="fixed bandwidth for every individual")
    bw.add_argument("--covariate-free", action="store_true", help="all weights equal to one")
    fit.add_argument("--high-dim", action="store_true",
                     help="empirical-Bayes noise variance and per-anchor pi selection")
    fit.add_argument("--standardize", action="store_true",
                     help="scale covariate columns to unit sd before computing distances")
    fit.add_argument("--grid", help="JSON file with pi / sigma2 / sigma2_beta lists, tol, max_sweeps")
    fit.add_argument("--threads", type=_positive_int, default=None)
    fit.add_argument("--seed", type=int, default=0, help="recorded for provenance; fitting is deterministic")
    fit.add_argument("--anchors", help="individuals to estimate, e.g. 0,4,10-19 (default all)")

    sim = sub.add_parser("simulate", help="write synthetic datasets with ground truth")
    _setting_args(sim)
    sim.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="score estimated graphs against truths")
    ev.add_argument("--truth", required=True, help="directory written by 'simulate'")
    ev.add_argument("--estimates", required=True, help="directory of fit outputs (same trial layout)")
    ev.add_argument("--out", required=True)

    rerun = sub.add_parser("rerun", help="repeat a fit from its manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", required=True)

    exp = sub.add_parser("experiment", help="simulate, fit and score a setting in one go")
    _setting_args(exp)
    exp.add_argument("--tau", type=float, default=None)
    exp.add_argument("--high-dim", action="store_true")
    exp.add_argument("--out", required=True)
    return parser


def _run_experiment(ns: argparse.Namespace) -> int:
    summary = run_experiment(
        _setting(ns), ns.trials, ns.seed, tau=ns.tau, high_dim=ns.high_dim, with_auc=True
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ("sensitivity", "specificity", "auc")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "seed", *keys, "seconds"])
        for t in summary.trials:
            w.writerow([t.trial, t.seed, *(repr(getattr(t.report, k)) for k in keys), f"{t.seconds:.3f}"])
        w.writerow(["mean", "", *(repr(summary.mean(k)) for k in keys), ""])
        w.writerow(["sd", "", *(repr(summary.sd(k)) for k in keys), ""])
    for k in keys:
        print(f"{k}: {summary.mean(k):.4f} (sd {summary.sd(k):.4f})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "fit":
            grid, controls = (None, None) if ns.grid is None else read_grid_file(ns.grid)
            extra = {} if controls is None else {"tol": controls.tol, "max_sweeps": controls.max_sweeps}
            config = FitConfig(
                data=ns.data, out=ns.out, covariates=ns.covariates, threshold=ns.threshold,
                tau=ns.tau, covariate_free=ns.covariate_free, high_dim=ns.high_dim,
                standardize=ns.standardize, grid=grid, threads=ns.threads, seed=ns.seed,
                anchors=parse_anchors(ns.anchors), **extra,
            )
            return run_fit(config)
        if ns.command == "simulate":
            return run_simulate(_setting(ns), ns.out, ns.trials, ns.seed)
        if ns.command == "eval":
            return run_eval(ns.truth, ns.estimates, ns.out)
        if ns.command == "rerun":
            return run_fit(config_from_manifest(ns.manifest, ns.out))
        if ns.command == "experiment":
            return _run_experiment(ns)
    except CovgraphError as exc:
        print(f"covgraph: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"covgraph: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    parser.error(f"unknown command {ns.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
