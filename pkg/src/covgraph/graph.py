"""Per-individual graph estimation: p weighted regressions per anchor, then
symmetrise the inclusion probabilities and threshold them.

All regressions for one response variable (every anchor, every grid cell) run
as a single batch. Anchors whose weight rows are identical produce identical
regressions, so they are fitted once and counted with multiplicity in the
global grid selection.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from covgraph.errors import CovgraphError, InvalidArgumentError
from covgraph.hyperparam import (
    AveragedFit,
    Controls,
    HyperGrid,
    ResponseFit,
    default_grid,
    fit_response,
    pooled_variance,
)
from covgraph.kernel_weights import WeightPlan, build_weight_plan
from covgraph.vi_core import SuffStats

log = logging.getLogger(__name__)

Mode = Literal["standard", "high-dim", "covariate-free"]
MODES = ("standard", "high-dim", "covariate-free")


@dataclass
class GraphEstimate:
    """Graph of one individual.

    ``prob`` rows/columns of response variables whose regression failed are NaN
    and listed in ``failed_responses``; their adjacency entries are 0.
    """

    individual: int
    prob: NDArray[np.float64]
    adjacency: NDArray[np.int8]
    hyper_provenance: dict[int, dict] = field(default_factory=dict)
    failed_responses: tuple[int, ...] = ()


@dataclass
class FitRequest:
    data: NDArray[np.float64]
    weight_plan: WeightPlan | None = None
    anchors: ArrayLike | None = None
    threshold: float = 0.5
    mode: Mode = "standard"
    grid: HyperGrid | None = None
    controls: Controls = field(default_factory=Controls)
    threads: int | None = None

    def __post_init__(self):
        X = np.asarray(self.data, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] < 2:
            raise InvalidArgumentError(f"data must be n x p with p >= 2, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("data contain non-finite entries")
        self.data = X
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError(f"threshold must lie in (0, 1), got {self.threshold}")
        n = X.shape[0]
        if self.mode == "covariate-free" or self.weight_plan is None:
            if self.mode != "covariate-free" and self.weight_plan is None:
                raise InvalidArgumentError("a weight plan is required unless mode='covariate-free'")
            self.weight_plan = build_weight_plan(covariate_free=True, n=n)
        if self.weight_plan.weights.shape != (n, n):
            raise InvalidArgumentError(
                f"weight plan is {self.weight_plan.weights.shape}, data have {n} rows"
            )
        anchors = np.arange(n) if self.anchors is None else np.asarray(self.anchors, dtype=np.int64)
        if anchors.ndim != 1 or anchors.size == 0 or anchors.min() < 0 or anchors.max() >= n:
            raise InvalidArgumentError("anchors must be a non-empty list of row indices")
        self.anchors = anchors

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def p(self) -> int:
        return self.data.shape[1]

    def resolved_grid(self) -> HyperGrid:
        if self.grid is not None:
            return self.grid
        return default_grid(self.n, self.p, pooled_variance(self.data))


def symmetrize(alpha_hat: ArrayLike) -> NDArray[np.float64]:
    """Average each off-diagonal pair; the diagonal is set to 0. NaN marks missing entries."""
    a = np.array(alpha_hat, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    np.fill_diagonal(a, 0.0)
    present = a[~np.isnan(a)]
    if np.any((present < 0) | (present > 1)):
        raise InvalidArgumentError("inclusion probabilities must lie in [0, 1]")
    out = 0.5 * (a + a.T)
    np.fill_diagonal(out, 0.0)
    return out


def threshold_graph(prob: ArrayLike, t: float = 0.5) -> NDArray[np.int8]:
    """Edge iff ``prob > t`` (strict); NaN entries give no edge."""
    P = np.asarray(prob, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        adj = (P > t).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return adj


def weighted_grams(data: NDArray[np.float64], weights: NDArray[np.float64]) -> NDArray[np.float64]:
    """``X' diag(w_l) X`` for every weight row ``l``."""
    return np.einsum("li,ij,ik->ljk", weights, data, data, optimize=True)


def response_stats(grams: NDArray[np.float64], wsum: NDArray[np.float64], j: int) -> SuffStats:
    p = grams.shape[-1]
    rest = np.delete(np.arange(p), j)
    return SuffStats(
        gram=np.ascontiguousarray(grams[:, rest][:, :, rest]),
        xty=np.ascontiguousarray(grams[:, rest, j]),
        yty=np.ascontiguousarray(grams[:, j, j]),
        wsum=wsum,
    )


def _provenance(rf: ResponseFit, a: int) -> dict:
    return {
        "pi": [float(v) for v in rf.pi],
        "sigma2": [float(v) for v in rf.sigma2[a]],
        "sigma2_beta": [float(v) for v in rf.sigma2_beta[a]],
        "weights": [float(v) for v in rf.weights[a]],
    }


def fit_one_regression(l: int, j: int, request: FitRequest) -> AveragedFit:
    """Averaged fit of variable ``j`` on the others for anchor ``l`` (all 0-based).

    The global grid selection runs over the request's anchors, exactly as
    :func:`estimate_all` does.
    """
    if not 0 <= j < request.p:
        raise InvalidArgumentError(f"response index {j} out of range for p={request.p}")
    if l not in set(request.anchors.tolist()):
        raise InvalidArgumentError(f"individual {l} is not among the requested anchors")
    rows, inverse, counts = _unique_rows(request.weight_plan.weights[request.anchors])
    rf = _fit_response(request, rows, counts, j)
    a = int(inverse[list(request.anchors).index(l)])
    if rf.failed[a]:
        raise CovgraphError(f"regression (individual={l}, response={j}) failed")
    return rf.averaged(a)


def _unique_rows(weights: NDArray[np.float64]):
    rows, inverse, counts = np.unique(weights, axis=0, return_inverse=True, return_counts=True)
    return rows, inverse.reshape(-1), counts


def _fit_response(request: FitRequest, rows, counts, j, grams=None) -> ResponseFit:
    if grams is None:
        grams = weighted_grams(request.data, rows)
    ss = response_stats(grams, rows.sum(axis=1), j)
    return fit_response(
        ss,
        request.resolved_grid(),
        counts=counts,
        controls=request.controls,
        high_dim=request.mode == "high-dim",
    )


def estimate_all(request: FitRequest) -> list[GraphEstimate]:
    """Estimate the graph of every requested anchor.

    Response variables are processed independently (optionally on a thread
    pool); each writes only its own row of the raw probability matrices, so
    the result does not depend on the number of threads. A response whose
    hyperparameter selection fails is recorded in ``failed_responses``
    rather than aborting the run.
    """
    rows, inverse, counts = _unique_rows(request.weight_plan.weights[request.anchors])
    grams = weighted_grams(request.data, rows)
    p = request.p
    raw = np.full((rows.shape[0], p, p), np.nan)
    fits: dict[int, ResponseFit | None] = {}

    def task(j: int):
        try:
            return j, _fit_response(request, rows, counts, j, grams)
        except CovgraphError as exc:
            log.warning("response %d failed: %s", j, exc)
            return j, None

    threads = request.threads or os.cpu_count() or 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, range(p)))
    else:
        results = [task(j) for j in range(p)]

    for j, rf in results:
        fits[j] = rf
        if rf is None:
            continue
        rest = np.delete(np.arange(p), j)
        raw[:, j, rest] = rf.alpha

    out = []
    for pos, l in enumerate(request.anchors):
        a = int(inverse[pos])
        failed = tuple(
            j for j in range(p) if fits[j] is None or bool(fits[j].failed[a])
        )
        r = raw[a].copy()
        for j in failed:
            r[j, :] = np.nan
            r[:, j] = np.nan
        prob = symmetrize(r)
        for j in failed:
            prob[j, :] = np.nan
            prob[:, j] = np.nan
            prob[j, j] = 0.0
        prov = {j: _provenance(fits[j], a) for j in range(p) if j not in failed}
        out.append(
            GraphEstimate(
                individual=int(l),
                prob=prob,
                adjacency=threshold_graph(prob, request.threshold),
                hyper_provenance=prov,
                failed_responses=failed,
            )
        )
    return out
