"""File formats, run configuration and the ``fit`` / ``simulate`` / ``eval`` drivers.

Matrices are headerless CSV files with one row per line. Floats are written
with 17 significant digits so reading a file back reproduces every value
exactly. Each run writes a ``manifest.json`` next to its outputs; the
manifest holds the full configuration, so a run can be repeated from it
alone (see :func:`config_from_manifest`).

Individuals and variables are numbered from 0 in file names and in the
manifest, matching row and column positions in the data file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
import re
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

import covgraph
from covgraph.errors import CovgraphError, InvalidArgumentError, ParseError, UndefinedMetricError
from covgraph.graph import FitRequest, estimate_all
from covgraph.hyperparam import Controls, HyperGrid
from covgraph.kernel_weights import build_weight_plan
from covgraph.simulation import SimSetting, graph_auc, sensitivity_specificity, simulate

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

MANIFEST = "manifest.json"
_INDEXED = re.compile(r"^(truth|prob|adj)_(\d+)\.csv$")


# -- matrices -------------------------------------------------------------------------


def read_matrix(path: str | os.PathLike) -> NDArray[np.float64]:
    """Read a headerless numeric CSV file.

    Trailing blank lines are ignored; any other irregularity is reported
    with its 1-based line number.

    Raises:
        ParseError: empty file, ragged rows, or a cell that is not a finite number.
    """
    path = str(path)
    rows: list[list[float]] = []
    width = None
    blank_from = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not c.strip() for c in record):
                blank_from = blank_from or lineno
                continue
            if blank_from is not None:
                raise ParseError("blank line inside the data", path, blank_from)
            values = []
            for col, cell in enumerate(record, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"column {col}: not a number: {cell.strip()!r}", path, lineno) from None
                if not math.isfinite(v):
                    raise ParseError(f"column {col}: non-finite value {cell.strip()!r}", path, lineno)
                values.append(v)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"expected {width} columns, found {len(values)}", path, lineno)
            rows.append(values)
    if not rows:
        raise ParseError("file contains no rows", path, 1)
    return np.asarray(rows, dtype=np.float64)


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_matrix(path: str | os.PathLike, matrix: ArrayLike) -> None:
    """Write a 1-d or 2-d array as headerless CSV (integers stay integers)."""
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise InvalidArgumentError(f"can only write 1-d or 2-d arrays, got {m.ndim}-d")
    as_int = np.issubdtype(m.dtype, np.integer) or m.dtype == np.bool_
    with open(path, "w", newline="") as fh:
        for row in m:
            fh.write(",".join(str(int(v)) if as_int else _cell(float(v)) for v in row))
            fh.write("\n")


@dataclass
class DataSet:
    data: NDArray[np.float64]
    covariates: NDArray[np.float64] | None = None

    @property
    def covariate_free(self) -> bool:
        return self.covariates is None


def load_dataset(data_path: str | os.PathLike, covariate_path: str | os.PathLike | None = None) -> DataSet:
    """Load an ``n x p`` data matrix and, optionally, an ``n x d`` covariate matrix.

    Raises:
        ParseError: malformed file, or the two files disagree on the number of rows
            (reported at the first line the shorter file lacks).
    """
    data = read_matrix(data_path)
    if covariate_path is None:
        return DataSet(data)
    cov = read_matrix(covariate_path)
    if cov.shape[0] != data.shape[0]:
        longer = data_path if data.shape[0] > cov.shape[0] else covariate_path
        raise ParseError(
            f"row-count mismatch: data has {data.shape[0]} rows, covariates have {cov.shape[0]}",
            str(longer),
            min(data.shape[0], cov.shape[0]) + 1,
        )
    return DataSet(data, cov)


def parse_anchors(text: str | None) -> list[int] | None:
    """``"0,3,7-9"`` -> ``[0, 3, 7, 8, 9]`` (0-based, ranges inclusive)."""
    if text is None or not text.strip():
        return None
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise InvalidArgumentError(f"empty anchor range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part.isdigit():
            out.append(int(part))
        else:
            raise InvalidArgumentError(f"bad anchor entry {part!r}; use e.g. 0,3,7-9")
    return sorted(set(out))


def read_grid_file(path: str | os.PathLike) -> tuple[dict | None, Controls]:
    """Read a JSON grid/controls file.

    Recognised keys: ``pi``, ``sigma2``, ``sigma2_beta`` (all three or none),
    ``tol`` and ``max_sweeps``. Returns the grid as a dict (``None`` when no
    grid keys are present) and the controls.
    """
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, str(path), exc.lineno) from None
    if not isinstance(cfg, dict):
        raise ParseError("grid file must hold a JSON object", str(path), 1)
    unknown = set(cfg) - {"pi", "sigma2", "sigma2_beta", "tol", "max_sweeps"}
    if unknown:
        raise InvalidArgumentError(f"unknown keys in grid file: {sorted(unknown)}")
    grid = None
    if {"pi", "sigma2", "sigma2_beta"} & set(cfg):
        grid = HyperGrid.from_dict(cfg).to_dict()
    controls = Controls(
        max_sweeps=int(cfg.get("max_sweeps", Controls.max_sweeps)),
        tol=float(cfg.get("tol", Controls.tol)),
    )
    return grid, controls


def sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _software() -> dict:
    return {
        "covgraph": covgraph.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


# -- fit ----------------------------------------------------------------------------------


@dataclass
class FitConfig:
    """Everything that determines the output of a ``fit`` run.

    ``grid`` is ``None`` for the data-driven default; the grid actually used
    is recorded in the manifest, so reruns use it verbatim.
    """

    data: str
    out: str
    covariates: str | None = None
    threshold: float = 0.5
    tau: float | None = None
    covariate_free: bool = False
    high_dim: bool = False
    standardize: bool = False
    grid: dict | None = None
    tol: float = Controls.tol
    max_sweeps: int = Controls.max_sweeps
    threads: int | None = None
    seed: int = 0
    anchors: list[int] | None = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.tau is not None and not (math.isfinite(self.tau) and self.tau > 0):
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if self.covariate_free and self.tau is not None:
            raise InvalidArgumentError("--tau and --covariate-free are mutually exclusive")
        if self.threads is not None and self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")
        Controls(self.max_sweeps, self.tol)


def _fit_request(config: FitConfig, ds: DataSet) -> tuple[FitRequest, list[float] | None]:
    grid = HyperGrid.from_dict(config.grid) if config.grid is not None else None
    common = dict(
        threshold=config.threshold,
        grid=grid,
        controls=Controls(config.max_sweeps, config.tol),
        threads=config.threads,
        anchors=config.anchors,
    )
    if config.covariate_free or ds.covariate_free:
        return FitRequest(ds.data, mode="covariate-free", **common), None
    plan = build_weight_plan(ds.covariates, config.tau, standardize=config.standardize)
    mode = "high-dim" if config.high_dim else "standard"
    return FitRequest(ds.data, plan, mode=mode, **common), plan.tau.tolist()


def run_fit(config: FitConfig) -> int:
    """Estimate all requested graphs and write them with a manifest.

    Returns:
        ``EXIT_OK``, or ``EXIT_PARTIAL`` when some regressions failed (the
        outputs and manifest are still written).
    """
    t0 = time.perf_counter()
    ds = load_dataset(config.data, config.covariates)
    request, tau = _fit_request(config, ds)
    t_load = time.perf_counter()
    graphs = estimate_all(request)
    t_fit = time.perf_counter()

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    anchors = {}
    for g in graphs:
        write_matrix(out / f"prob_{g.individual}.csv", g.prob)
        write_matrix(out / f"adj_{g.individual}.csv", g.adjacency)
        anchors[str(g.individual)] = {
            "failed_responses": list(g.failed_responses),
            "hyper": {str(j): v for j, v in g.hyper_provenance.items()},
        }
        failures += [{"individual": g.individual, "response": j} for j in g.failed_responses]

    snapshot = asdict(config)
    snapshot["grid"] = request.resolved_grid().to_dict()
    snapshot["data"] = str(Path(config.data).resolve())
    if config.covariates is not None:
        snapshot["covariates"] = str(Path(config.covariates).resolve())
    inputs = {"data_sha256": sha256(config.data)}
    if config.covariates is not None:
        inputs["covariates_sha256"] = sha256(config.covariates)
    status = EXIT_PARTIAL if failures else EXIT_OK
    _write_json(
        out / MANIFEST,
        {
            "command": "fit",
            "config": snapshot,
            "inputs": inputs,
            "software": _software(),
            "mode": request.mode,
            "n": request.n,
            "p": request.p,
            "bandwidths": tau,
            "anchors": anchors,
            "failures": failures,
            "status": "partial" if failures else "ok",
            "timings_seconds": {
                "load": t_load - t0,
                "estimate": t_fit - t_load,
                "write": time.perf_counter() - t_fit,
            },
        },
    )
    if failures:
        log.error("%d regression(s) failed; see %s", len(failures), out / MANIFEST)
    return status


def config_from_manifest(path: str | os.PathLike, out: str | None = None) -> FitConfig:
    """Rebuild the configuration of an earlier ``fit`` run.

    The inputs are checked against the recorded checksums so a changed data
    file is not silently refitted.
    """
    with open(path) as fh:
        man = json.load(fh)
    if man.get("command") != "fit":
        raise InvalidArgumentError(f"{path} is not a fit manifest")
    cfg = dict(man["config"])
    if out is not None:
        cfg["out"] = out
    config = FitConfig(**cfg)
    if sha256(config.data) != man["inputs"]["data_sha256"]:
        raise InvalidArgumentError(f"{config.data} changed since the recorded run")
    if config.covariates is not None and sha256(config.covariates) != man["inputs"]["covariates_sha256"]:
        raise InvalidArgumentError(f"{config.covariates} changed since the recorded run")
    return config


# -- simulate -------------------------------------------------------------------------------


def trial_dir(root: Path, trial: int) -> Path:
    return root / f"trial_{trial:03d}"


def run_simulate(setting: SimSetting, out: str, trials: int = 1, seed: int = 0) -> int:
    """Write ``trials`` independent draws of a setting.

    Layout: ``<out>/trial_<t>/data.csv``, ``covariates.csv`` (unless the
    setting has none) and ``truth_<l>.csv`` per individual, plus
    ``<out>/manifest.json`` with the setting and per-trial seeds.
    """
    from covgraph.experiment import trial_seeds

    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    seeds = trial_seeds(seed, trials)
    records = []
    for t, s in enumerate(seeds):
        sim = simulate(setting, s)
        d = trial_dir(root, t)
        d.mkdir(exist_ok=True)
        write_matrix(d / "data.csv", sim.data)
        if sim.covariates is not None:
            write_matrix(d / "covariates.csv", sim.covariates)
        for l, truth in enumerate(sim.truths):
            write_matrix(d / f"truth_{l}.csv", truth)
        meta = {k: v for k, v in sim.meta.items()}
        records.append({"trial": t, "seed": s, "dir": d.name, "meta": meta})
    _write_json(
        root / MANIFEST,
        {
            "command": "simulate",
            "setting": setting.to_dict(),
            "root_seed": seed,
            "trials": records,
            "software": _software(),
        },
    )
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------------


def _indexed(d: Path, prefix: str) -> dict[int, Path]:
    found = {}
    for f in d.iterdir():
        m = _INDEXED.match(f.name)
        if m and m.group(1) == prefix:
            found[int(m.group(2))] = f
    return found


def _trial_pairs(truth_root: Path, est_root: Path) -> list[tuple[str, Path, Path]]:
    subdirs = sorted(p.name for p in truth_root.iterdir() if p.is_dir() and p.name.startswith("trial_"))
    if not subdirs:
        return [("0", truth_root, est_root)]
    pairs = []
    for name in subdirs:
        if not (est_root / name).is_dir():
            raise InvalidArgumentError(f"no estimates for {name} under {est_root}")
        pairs.append((str(int(name.split("_")[1])), truth_root / name, est_root / name))
    return pairs


def _fmt(v: float) -> str:
    return "nan" if v is None or not math.isfinite(v) else _cell(v)


def run_eval(truth_dir: str, estimates_dir: str, out: str) -> int:
    """Score estimates against truths and write ``<out>/metrics.csv``.

    One row per (trial, individual) with sensitivity, specificity and AUC
    (AUC only where ``prob_<l>.csv`` exists and both classes are present),
    followed by ``mean`` and ``sd`` rows computed over per-trial means.
    """
    rows = []
    trial_means = []
    for trial, tdir, edir in _trial_pairs(Path(truth_dir), Path(estimates_dir)):
        truths = _indexed(tdir, "truth")
        adjs = _indexed(edir, "adj")
        probs = _indexed(edir, "prob")
        if not adjs:
            raise InvalidArgumentError(f"no adj_<l>.csv files in {edir}")
        per = []
        for l in sorted(adjs):
            if l not in truths:
                raise InvalidArgumentError(f"estimate for individual {l} has no truth in {tdir}")
            t = read_matrix(truths[l])
            sens, spec = sensitivity_specificity(t, read_matrix(adjs[l]))
            a = float("nan")
            if l in probs:
                try:
                    a = graph_auc(t, np.nan_to_num(read_matrix(probs[l]), nan=0.0))
                except UndefinedMetricError:
                    pass
            rows.append([trial, str(l), sens, spec, a])
            per.append((sens, spec, a))
        with np.errstate(all="ignore"):
            arr = np.array(per, dtype=np.float64)
            trial_means.append(
                [float(np.nanmean(c)) if np.isfinite(c).any() else float("nan") for c in arr.T]
            )
    tm = np.array(trial_means)
    summary_mean = [float(np.nanmean(c)) if np.isfinite(c).any() else float("nan") for c in tm.T]
    summary_sd = [
        float(np.nanstd(c, ddof=1)) if np.isfinite(c).sum() > 1 else 0.0 if np.isfinite(c).any() else float("nan")
        for c in tm.T
    ]
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "individual", "sensitivity", "specificity", "auc"])
        for r in rows:
            w.writerow(r[:2] + [_fmt(v) for v in r[2:]])
        w.writerow(["mean", ""] + [_fmt(v) for v in summary_mean])
        w.writerow(["sd", ""] + [_fmt(v) for v in summary_sd])
    return EXIT_OK


def read_metrics(path: str | os.PathLike) -> dict[str, dict[str, float]]:
    """Summary rows of a ``metrics.csv`` as ``{"mean": {...}, "sd": {...}}``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = {}
        for row in reader:
            if row["trial"] in ("mean", "sd"):
                out[row["trial"]] = {
                    k: float(row[k]) for k in ("sensitivity", "specificity", "auc")
                }
    return out


__all__ = [
    "CovgraphError",
    "DataSet",
    "EXIT_ERROR",
    "EXIT_OK",
    "EXIT_PARTIAL",
    "EXIT_USAGE",
    "FitConfig",
    "config_from_manifest",
    "load_dataset",
    "parse_anchors",
    "read_grid_file",
    "read_matrix",
    "read_metrics",
    "run_eval",
    "run_fit",
    "run_simulate",
    "write_matrix",
]
