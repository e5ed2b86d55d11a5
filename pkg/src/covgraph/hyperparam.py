"""Hyperparameter selection for the weighted spike-and-slab regressions.

Standard scheme, per response variable:

1. for every prior inclusion probability ``pi`` on the grid, pick one
   ``(sigma2, sigma2_beta)`` pair for *all* anchors, the one maximising the
   ELBO summed over the anchors' regressions;
2. per anchor, average the resulting ``|pi grid|`` fits with softmax(ELBO)
   weights.

High-dimensional scheme: ``sigma2`` is estimated per regression by
empirical Bayes, ``sigma2_beta`` is picked globally per ``pi`` as above, and
``pi`` is picked per anchor by maximum ELBO.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from covgraph.errors import InvalidArgumentError, SelectionFailureError
from covgraph.vi_core import (
    DEFAULT_MAX_SWEEPS,
    DEFAULT_TOL,
    RegressionProblem,
    SuffStats,
    VariationalState,
    fit_batch,
)

SIGMA2_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
SIGMA2_BETA_DEFAULTS = (0.1, 1.0, 10.0)
N_PI = 5
SIGMA2_FLOOR_FRACTION = 1e-8


@dataclass(frozen=True)
class Controls:
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise InvalidArgumentError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise InvalidArgumentError("tol must be positive")


@dataclass(frozen=True)
class HyperGrid:
    pi_candidates: tuple[float, ...]
    sigma2_candidates: tuple[float, ...]
    sigma2_beta_candidates: tuple[float, ...]

    def __post_init__(self):
        for name in ("pi_candidates", "sigma2_candidates", "sigma2_beta_candidates"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise InvalidArgumentError(f"{name} is empty")
            if not all(np.isfinite(v) and v > 0 for v in vals):
                raise InvalidArgumentError(f"{name} must be positive and finite: {vals}")
            object.__setattr__(self, name, vals)
        if not all(v < 1 for v in self.pi_candidates):
            raise InvalidArgumentError(f"pi candidates must lie in (0, 1): {self.pi_candidates}")

    def to_dict(self) -> dict:
        return {
            "pi": list(self.pi_candidates),
            "sigma2": list(self.sigma2_candidates),
            "sigma2_beta": list(self.sigma2_beta_candidates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> HyperGrid:
        try:
            return cls(tuple(d["pi"]), tuple(d["sigma2"]), tuple(d["sigma2_beta"]))
        except KeyError as exc:
            raise InvalidArgumentError(f"grid is missing key {exc}") from None


def pooled_variance(data: ArrayLike) -> float:
    """Mean uncentred second moment of the columns (the working model is zero-mean)."""
    X = np.asarray(data, dtype=np.float64)
    v = float(np.mean(X * X))
    return v if v > 0 and np.isfinite(v) else 1.0


def default_grid(n: int, p: int, pooled_var: float = 1.0) -> HyperGrid:
    """Five ``pi`` values log-spaced from ``1/(p-1)`` up to 0.5, ``sigma2`` as
    multiples of the pooled response variance, and ``sigma2_beta`` in {0.1, 1, 10}.

    ``n`` is accepted for interface symmetry; the grid does not depend on it.
    """
    del n
    lo = min(1.0 / max(p - 1, 1), 0.5)
    pis = tuple(sorted(set(float(v) for v in np.geomspace(lo, 0.5, N_PI))))
    return HyperGrid(
        pi_candidates=pis,
        sigma2_candidates=tuple(m * pooled_var for m in SIGMA2_MULTIPLIERS),
        sigma2_beta_candidates=SIGMA2_BETA_DEFAULTS,
    )


@dataclass
class AveragedFit:
    """Softmax-over-ELBO average of fits that differ only in ``pi``.

    ``hypers`` lists the ``(pi, sigma2, sigma2_beta)`` of each member, in the
    same order as ``weights`` and ``member_elbos``.
    """

    alpha_bar: NDArray[np.float64]
    mu_bar: NDArray[np.float64]
    member_elbos: NDArray[np.float64]
    weights: NDArray[np.float64]
    hypers: list[tuple[float, float, float]] = field(default_factory=list)


def softmax_weights(elbos: ArrayLike, axis: int = -1) -> NDArray[np.float64]:
    """Unit-temperature softmax; ``-inf`` entries get weight 0."""
    e = np.asarray(elbos, dtype=np.float64)
    top = np.max(e, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(e - top)
    return w / np.sum(w, axis=axis, keepdims=True)


def softmax_average(states: Sequence[VariationalState]) -> AveragedFit:
    if not states:
        raise InvalidArgumentError("need at least one member fit")
    elbos = np.array([s.elbo for s in states], dtype=np.float64)
    if not np.all(np.isfinite(elbos)):
        raise InvalidArgumentError("member ELBOs must be finite")
    w = softmax_weights(elbos)
    alphas = np.stack([s.alpha for s in states])
    mus = np.stack([s.mu for s in states])
    return AveragedFit(
        alpha_bar=np.tensordot(w, alphas, axes=1),
        mu_bar=np.tensordot(w, mus, axes=1),
        member_elbos=elbos,
        weights=w,
    )


def select_cell(
    total_elbo: ArrayLike, sigma2_values: Sequence[float], sigma2_beta_values: Sequence[float]
) -> tuple[int, int]:
    """Index of the best ``(sigma2, sigma2_beta)`` cell of a summed-ELBO table.

    Ties go to the smallest ``sigma2``, then the smallest ``sigma2_beta``,
    whatever order the candidates were listed in.

    Raises:
        SelectionFailureError: every cell is non-finite.
    """
    t = np.asarray(total_elbo, dtype=np.float64)
    finite = np.isfinite(t)
    if not finite.any():
        raise SelectionFailureError("every grid cell failed numerically")
    best = np.max(t[finite])
    cells = [
        (sigma2_values[i], sigma2_beta_values[j], i, j)
        for i, j in zip(*np.nonzero(finite & (t == best)))
    ]
    _, _, i, j = min(cells)
    return int(i), int(j)


def grid_select(
    problems: Sequence[RegressionProblem],
    grid: HyperGrid,
    pi: float,
    controls: Controls = Controls(),
) -> tuple[float, float]:
    """Global ``(sigma2, sigma2_beta)`` for one ``pi`` across all anchor regressions."""
    if not problems:
        raise InvalidArgumentError("no regression problems given")
    ss = stack_suff_stats([p.suff_stats() for p in problems])
    s2 = np.asarray(grid.sigma2_candidates)[:, None, None]
    sb = np.asarray(grid.sigma2_beta_candidates)[None, :, None]
    res = fit_batch(ss, pi, s2, sb, max_sweeps=controls.max_sweeps, tol=controls.tol)
    total = np.where(res.failed_sweep >= 0, -np.inf, res.elbo).sum(axis=-1)
    i, j = select_cell(total, grid.sigma2_candidates, grid.sigma2_beta_candidates)
    return grid.sigma2_candidates[i], grid.sigma2_beta_candidates[j]


def stack_suff_stats(stats: Sequence[SuffStats]) -> SuffStats:
    return SuffStats(
        gram=np.stack([s.gram for s in stats]),
        xty=np.stack([s.xty for s in stats]),
        yty=np.stack([np.asarray(s.yty) for s in stats]),
        wsum=np.stack([np.asarray(s.wsum) for s in stats]),
    )


def sigma2_floor(ss: SuffStats) -> NDArray[np.float64]:
    """Lower clamp for empirical-Bayes ``sigma2``: a tiny fraction of the weighted response variance."""
    var = np.asarray(ss.yty) / np.asarray(ss.wsum)
    return SIGMA2_FLOOR_FRACTION * np.where(var > 0, var, 1.0)


def empirical_bayes_sigma2(
    problem: RegressionProblem,
    pi: float = 0.1,
    sigma2_beta: float = 1.0,
    controls: Controls = Controls(),
) -> float:
    """ELBO-maximising ``sigma2`` with ``pi`` and ``sigma2_beta`` fixed.

    ``sigma2`` is updated in closed form inside the coordinate-ascent loop,
    starting from the weighted second moment of the response, and never drops
    below :func:`sigma2_floor`.
    """
    ss = problem.suff_stats()
    if not float(ss.wsum) > 0:
        raise InvalidArgumentError("all weights are zero")
    floor = sigma2_floor(ss)
    start = max(float(ss.yty / ss.wsum), float(floor))
    res = fit_batch(
        ss, pi, start, sigma2_beta,
        max_sweeps=controls.max_sweeps, tol=controls.tol,
        estimate_sigma2=True, sigma2_floor=floor,
    )
    return float(res.sigma2)


@dataclass
class ResponseFit:
    """Averaged fits of one response variable for a set of anchors (leading axis).

    ``sigma2`` / ``sigma2_beta`` have shape ``(anchors, members)``; ``failed``
    flags anchors for which no member fit survived.
    """

    alpha: NDArray[np.float64]
    mu: NDArray[np.float64]
    weights: NDArray[np.float64]
    member_elbos: NDArray[np.float64]
    pi: NDArray[np.float64]
    sigma2: NDArray[np.float64]
    sigma2_beta: NDArray[np.float64]
    failed: NDArray[np.bool_]

    def averaged(self, a: int) -> AveragedFit:
        hypers = [
            (float(p), float(s), float(b))
            for p, s, b in zip(self.pi, self.sigma2[a], self.sigma2_beta[a])
        ]
        return AveragedFit(
            self.alpha[a], self.mu[a], self.member_elbos[a], self.weights[a], hypers
        )


def fit_response(
    ss: SuffStats,
    grid: HyperGrid,
    counts: ArrayLike | None = None,
    controls: Controls = Controls(),
    high_dim: bool = False,
) -> ResponseFit:
    """Run the selection scheme for one response over a batch of anchors.

    Args:
        ss: sufficient statistics with a leading anchor axis.
        counts: multiplicity of each anchor in the global ELBO sum (anchors
            with identical weight rows are fitted once and counted here).
        high_dim: use the empirical-Bayes variant.

    Raises:
        SelectionFailureError: no ``pi`` candidate produced a usable grid cell.
    """
    n_anchor = ss.gram.shape[0]
    counts = np.ones(n_anchor) if counts is None else np.asarray(counts, dtype=np.float64)
    pis = np.sort(np.asarray(grid.pi_candidates))
    sbs = np.asarray(grid.sigma2_beta_candidates)
    if high_dim:
        s2s = np.zeros(1)  # placeholder axis; sigma2 is estimated
        floor = sigma2_floor(ss)
        start = np.maximum(np.asarray(ss.yty) / np.asarray(ss.wsum), floor)
        res = fit_batch(
            ss, pis[:, None, None, None], start, sbs[None, None, :, None],
            max_sweeps=controls.max_sweeps, tol=controls.tol,
            estimate_sigma2=True, sigma2_floor=floor,
        )
    else:
        s2s = np.asarray(grid.sigma2_candidates)
        res = fit_batch(
            ss, pis[:, None, None, None], s2s[None, :, None, None], sbs[None, None, :, None],
            max_sweeps=controls.max_sweeps, tol=controls.tol,
        )
    # res arrays: (pi, sigma2, sigma2_beta, anchor[, m])
    elbo = np.where(res.failed_sweep >= 0, -np.inf, res.elbo)
    total = np.sum(elbo * counts, axis=-1)

    n_pi, m = len(pis), ss.gram.shape[-1]
    member_alpha = np.full((n_pi, n_anchor, m), np.nan)
    member_mu = np.full((n_pi, n_anchor, m), np.nan)
    member_elbo = np.full((n_pi, n_anchor), -np.inf)
    member_s2 = np.full((n_pi, n_anchor), np.nan)
    member_sb = np.full((n_pi, n_anchor), np.nan)
    for r in range(n_pi):
        try:
            i, j = select_cell(total[r], s2s, sbs)
        except SelectionFailureError:
            continue
        member_alpha[r] = res.alpha[r, i, j]
        member_mu[r] = res.mu[r, i, j]
        member_elbo[r] = elbo[r, i, j]
        member_s2[r] = res.sigma2[r, i, j]
        member_sb[r] = sbs[j]
    if not np.isfinite(member_elbo).any():
        raise SelectionFailureError("every pi candidate failed for this response")

    member_elbo = member_elbo.T  # (anchor, pi)
    failed = ~np.isfinite(member_elbo).any(axis=1)
    if high_dim:
        weights = np.zeros_like(member_elbo)
        best = np.argmax(member_elbo, axis=1)
        weights[np.arange(n_anchor), best] = 1.0
    else:
        weights = softmax_weights(member_elbo, axis=1)
    weights[failed] = np.nan
    safe_alpha = np.where(np.isfinite(member_alpha), member_alpha, 0.0)
    safe_mu = np.where(np.isfinite(member_mu), member_mu, 0.0)
    wt = np.where(np.isfinite(weights), weights, 0.0).T[..., None]
    alpha = np.sum(wt * safe_alpha, axis=0)
    mu = np.sum(wt * safe_mu, axis=0)
    alpha[failed] = np.nan
    mu[failed] = np.nan
    return ResponseFit(
        alpha=alpha,
        mu=mu,
        weights=weights,
        member_elbos=member_elbo,
        pi=pis,
        sigma2=member_s2.T,
        sigma2_beta=member_sb.T,
        failed=failed,
    )
