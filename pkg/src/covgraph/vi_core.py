"""Weighted spike-and-slab regression by batch-wise coordinate-ascent VI.

One regression takes a response ``y`` (``n``), predictors ``X`` (``n x m``)
and non-negative observation weights ``w``; the working likelihood is
``prod_i N(y_i; x_i' beta, sigma2)^{w_i}`` and each coefficient has prior
``beta_k | gamma_k=1 ~ N(0, sigma2 * sigma2_beta)``, ``gamma_k ~ Bern(pi)``.

The variational family factorises over predictors, each factor being a
spike-and-slab with inclusion probability ``alpha_k``, slab mean ``mu_k`` and
slab variance ``s2_k``. Every update is written in terms of the weighted
sufficient statistics

    G = X' W X,   b = X' W y,   yy = y' W y,   wsum = sum(w)

so the same kernel runs on a single problem or on a broadcast batch of them
(hyperparameter cells x anchors), which is how :mod:`covgraph.hyperparam`
drives it. Batch elements never interact: each one freezes as soon as its own
ELBO change drops under ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logit

from covgraph.errors import InvalidArgumentError, NumericalFailureError

ALPHA_EPS = 1e-12
DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 500
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class HyperChoice:
    pi: float
    sigma2: float
    sigma2_beta: float

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise InvalidArgumentError(f"pi must lie in (0, 1), got {self.pi!r}")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InvalidArgumentError(f"sigma2 must be positive, got {self.sigma2!r}")
        if not (np.isfinite(self.sigma2_beta) and self.sigma2_beta > 0):
            raise InvalidArgumentError(f"sigma2_beta must be positive, got {self.sigma2_beta!r}")


@dataclass(frozen=True)
class SuffStats:
    """Weighted Gram quantities of one regression (or a leading batch of them)."""

    gram: NDArray[np.float64]
    xty: NDArray[np.float64]
    yty: NDArray[np.float64]
    wsum: NDArray[np.float64]


@dataclass(frozen=True)
class RegressionProblem:
    response: NDArray[np.float64]
    predictors: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self):
        y = np.asarray(self.response, dtype=np.float64)
        X = np.asarray(self.predictors, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or X.ndim != 2 or w.ndim != 1:
            raise InvalidArgumentError("response and weights must be vectors, predictors a matrix")
        if not (X.shape[0] == y.shape[0] == w.shape[0]):
            raise InvalidArgumentError(
                f"inconsistent sizes: response {y.shape}, predictors {X.shape}, weights {w.shape}"
            )
        if X.shape[1] < 1:
            raise InvalidArgumentError("need at least one predictor")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
            raise InvalidArgumentError("non-finite entries in regression problem")
        if np.any(w < 0) or not np.any(w > 0):
            raise InvalidArgumentError("weights must be non-negative with at least one positive")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "weights", w)

    @property
    def n_predictors(self) -> int:
        return self.predictors.shape[1]

    def suff_stats(self) -> SuffStats:
        X, y, w = self.predictors, self.response, self.weights
        Xw = X * w[:, None]
        return SuffStats(
            gram=Xw.T @ X,
            xty=Xw.T @ y,
            yty=np.asarray(np.dot(w * y, y)),
            wsum=np.asarray(w.sum()),
        )


@dataclass
class VariationalState:
    alpha: NDArray[np.float64]
    mu: NDArray[np.float64]
    s2: NDArray[np.float64]
    elbo: float = float("nan")
    iterations: int = 0
    converged: bool = False
    sigma2: float | None = None
    elbo_trace: list[float] = field(default_factory=list)


# -- closed-form updates on sufficient statistics (broadcast over batch dims) --


def _s2(diag_gram, sigma2, sigma2_beta):
    return sigma2[..., None] / (1.0 / sigma2_beta[..., None] + diag_gram)


def _alpha(mu, s2, pi, sigma2, sigma2_beta):
    z = (
        logit(pi)[..., None]
        + mu * mu / (2.0 * s2)
        + 0.5 * np.log(s2 / (sigma2 * sigma2_beta)[..., None])
    )
    return np.clip(expit(z), ALPHA_EPS, 1.0 - ALPHA_EPS)


def _gram_times(gram, v):
    return np.einsum("...ij,...j->...i", gram, v)


def _expected_rss(ss: SuffStats, alpha, mu, s2, gram_r=None):
    r = alpha * mu
    if gram_r is None:
        gram_r = _gram_times(ss.gram, r)
    diag = np.diagonal(ss.gram, axis1=-2, axis2=-1)
    var_term = np.sum(diag * (alpha * (mu * mu + s2) - r * r), axis=-1)
    return ss.yty - 2.0 * np.sum(r * ss.xty, axis=-1) + np.sum(r * gram_r, axis=-1) + var_term


def _elbo(ss: SuffStats, alpha, mu, s2, pi, sigma2, sigma2_beta, gram_r=None):
    erss = _expected_rss(ss, alpha, mu, s2, gram_r)
    loglik = -0.5 * ss.wsum * (LOG_2PI + np.log(sigma2)) - erss / (2.0 * sigma2)
    pi_ = pi[..., None]
    kl_gamma = np.sum(
        alpha * np.log(alpha / pi_) + (1.0 - alpha) * np.log((1.0 - alpha) / (1.0 - pi_)), axis=-1
    )
    slab_var = (sigma2 * sigma2_beta)[..., None]
    kl_beta = 0.5 * np.sum(alpha * (np.log(slab_var / s2) + (s2 + mu * mu) / slab_var - 1.0), axis=-1)
    return loglik - kl_gamma - kl_beta


def _sigma2_update(ss: SuffStats, alpha, mu, s2, sigma2_beta, floor, gram_r=None):
    # Exact ELBO maximiser in sigma2 with (alpha, mu, s2) held fixed; the
    # slab prior also scales with sigma2, hence the alpha-mass terms.
    erss = _expected_rss(ss, alpha, mu, s2, gram_r)
    prior = np.sum(alpha * (s2 + mu * mu), axis=-1) / sigma2_beta
    est = (erss + prior) / (ss.wsum + np.sum(alpha, axis=-1))
    return np.maximum(est, floor)


def _batch_sweep(gram, diag, xty, alpha, mu, s2, gram_r, pi, sigma2, sigma2_beta):
    """Slab means in order k = 1..m with the freshest values, then every alpha at once."""
    mu = mu.copy()
    ratio = s2 / sigma2[..., None]
    for k in range(mu.shape[-1]):
        r_old = alpha[..., k] * mu[..., k]
        mu[..., k] = ratio[..., k] * (xty[..., k] - gram_r[..., k] + diag[..., k] * r_old)
        gram_r = gram_r + gram[..., :, k] * (alpha[..., k] * mu[..., k] - r_old)[..., None]
    alpha = _alpha(mu, s2, pi, sigma2, sigma2_beta)
    return alpha, mu, _gram_times(gram, alpha * mu)


def _componentwise_sweep(gram, diag, xty, alpha, mu, s2, gram_r, pi, sigma2, sigma2_beta):
    """Each (mu_k, alpha_k) pair updated in turn; every step is an exact coordinate maximiser."""
    alpha, mu = alpha.copy(), mu.copy()
    ratio = s2 / sigma2[..., None]
    for k in range(mu.shape[-1]):
        r_old = alpha[..., k] * mu[..., k]
        mu[..., k] = ratio[..., k] * (xty[..., k] - gram_r[..., k] + diag[..., k] * r_old)
        alpha[..., k] = _alpha(
            mu[..., k : k + 1], s2[..., k : k + 1], pi, sigma2, sigma2_beta
        )[..., 0]
        gram_r = gram_r + gram[..., :, k] * (alpha[..., k] * mu[..., k] - r_old)[..., None]
    return alpha, mu, _gram_times(gram, alpha * mu)


def _finish_sweep(ss, cand, s2, pi, sigma2, sigma2_beta, floor, estimate_sigma2):
    alpha, mu, gram_r = cand
    if estimate_sigma2:
        sigma2 = _sigma2_update(ss, alpha, mu, s2, sigma2_beta, floor, gram_r)
    return sigma2, _elbo(ss, alpha, mu, s2, pi, sigma2, sigma2_beta, gram_r)


@dataclass
class BatchResult:
    """Arrays over the batch shape; ``failed_sweep`` is -1 where no failure occurred."""

    alpha: NDArray[np.float64]
    mu: NDArray[np.float64]
    s2: NDArray[np.float64]
    elbo: NDArray[np.float64]
    sigma2: NDArray[np.float64]
    iterations: NDArray[np.int64]
    converged: NDArray[np.bool_]
    failed_sweep: NDArray[np.int64]
    trace: NDArray[np.float64] | None = None


def fit_batch(
    ss: SuffStats,
    pi: ArrayLike,
    sigma2: ArrayLike,
    sigma2_beta: ArrayLike,
    *,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    tol: float = DEFAULT_TOL,
    estimate_sigma2: bool = False,
    sigma2_floor: ArrayLike = 0.0,
    record_trace: bool = False,
) -> BatchResult:
    """Run the coordinate-ascent schedule on a broadcast batch of regressions.

    The batch shape is the broadcast of ``ss.gram.shape[:-2]`` with the shapes
    of the hyperparameter arrays (``sigma2`` is the starting value when
    ``estimate_sigma2`` is set). One sweep is: slab variances, slab means for
    k = 1..m in order using the freshest values, all inclusion probabilities
    at once, then ``sigma2`` if estimated. Converged elements leave the
    working set, so every element follows exactly the trajectory it would
    follow if fitted alone.
    """
    if max_sweeps < 1:
        raise InvalidArgumentError("max_sweeps must be >= 1")
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    m = ss.gram.shape[-1]
    ss_batch = ss.gram.shape[:-2]
    batch = np.broadcast_shapes(
        ss_batch, np.shape(pi), np.shape(sigma2), np.shape(sigma2_beta), np.shape(sigma2_floor)
    )
    size = int(np.prod(batch, dtype=np.int64))

    def flat(a):
        return np.broadcast_to(np.asarray(a, dtype=np.float64), batch).reshape(size).copy()

    src = np.broadcast_to(
        np.arange(int(np.prod(ss_batch, dtype=np.int64))).reshape(ss_batch), batch
    ).reshape(size)
    gram_u = ss.gram.reshape(-1, m, m)
    xty_u = ss.xty.reshape(-1, m)
    yty_u = np.asarray(ss.yty, dtype=np.float64).reshape(-1)
    wsum_u = np.asarray(ss.wsum, dtype=np.float64).reshape(-1)

    pi_f, sb_f, floor_f = flat(pi), flat(sigma2_beta), flat(sigma2_floor)
    sig_f = flat(sigma2)
    alpha_f = np.repeat(pi_f[:, None], m, axis=1)
    mu_f = np.zeros((size, m))
    s2_f = _s2(np.diagonal(gram_u, axis1=-2, axis2=-1)[src], sig_f, sb_f)
    elbo_f = np.full(size, np.nan)
    iters_f = np.zeros(size, dtype=np.int64)
    conv_f = np.zeros(size, dtype=bool)
    failed_f = np.full(size, -1, dtype=np.int64)

    idx = np.arange(size)
    w_ss = SuffStats(gram_u[src], xty_u[src], yty_u[src], wsum_u[src])
    w_gr = np.zeros((size, m))
    elbo_f[:] = _elbo(w_ss, alpha_f, mu_f, s2_f, pi_f, sig_f, sb_f, w_gr)
    failed_f[~np.isfinite(elbo_f)] = 0
    trace = [elbo_f.copy()] if record_trace else None

    keep = np.isfinite(elbo_f)
    for sweep in range(1, max_sweeps + 1):
        if not keep.all():
            idx = idx[keep]
            w_ss = SuffStats(w_ss.gram[keep], w_ss.xty[keep], w_ss.yty[keep], w_ss.wsum[keep])
            w_gr = w_gr[keep]
        if idx.size == 0:
            break
        diag = np.diagonal(w_ss.gram, axis1=-2, axis2=-1)
        pi_w, sb_w, sig_w = pi_f[idx], sb_f[idx], sig_f[idx]
        alpha_w, mu_w, elbo_w = alpha_f[idx], mu_f[idx], elbo_f[idx]
        s2_w = _s2(diag, sig_w, sb_w)

        cand = _batch_sweep(w_ss.gram, diag, w_ss.xty, alpha_w, mu_w, s2_w, w_gr, pi_w, sig_w, sb_w)
        cand_sig, cand_elbo = _finish_sweep(
            w_ss, cand, s2_w, pi_w, sig_w, sb_w, floor_f[idx], estimate_sigma2
        )
        # The simultaneous alpha step can overshoot on correlated designs; those
        # elements redo the sweep in component-wise order, which cannot lower the ELBO.
        fallback = cand_elbo < elbo_w
        if fallback.any():
            fb = np.flatnonzero(fallback)
            safe = _componentwise_sweep(
                w_ss.gram[fb], diag[fb], w_ss.xty[fb], alpha_w[fb], mu_w[fb], s2_w[fb],
                w_gr[fb], pi_w[fb], sig_w[fb], sb_w[fb],
            )
            sub = SuffStats(w_ss.gram[fb], w_ss.xty[fb], w_ss.yty[fb], w_ss.wsum[fb])
            safe_sig, safe_elbo = _finish_sweep(
                sub, safe, s2_w[fb], pi_w[fb], sig_w[fb], sb_w[fb], floor_f[idx][fb],
                estimate_sigma2,
            )
            for c, sv in zip(cand, safe):
                c[fb] = sv
            cand_sig[fb] = safe_sig
            cand_elbo[fb] = safe_elbo

        alpha_f[idx], mu_f[idx], s2_f[idx] = cand[0], cand[1], s2_w
        w_gr = cand[2]
        sig_f[idx] = cand_sig
        bad = ~np.isfinite(cand_elbo)
        failed_f[idx[bad]] = sweep
        iters_f[idx[~bad]] = sweep
        done = ~bad & (np.abs(cand_elbo - elbo_w) < tol)
        conv_f[idx[done]] = True
        elbo_f[idx[~bad]] = cand_elbo[~bad]
        keep = ~bad & ~done
        if record_trace:
            trace.append(elbo_f.copy())

    return BatchResult(
        alpha=alpha_f.reshape(batch + (m,)),
        mu=mu_f.reshape(batch + (m,)),
        s2=s2_f.reshape(batch + (m,)),
        elbo=elbo_f.reshape(batch),
        sigma2=sig_f.reshape(batch),
        iterations=iters_f.reshape(batch),
        converged=conv_f.reshape(batch),
        failed_sweep=failed_f.reshape(batch),
        trace=np.stack(trace).reshape((-1,) + batch) if record_trace else None,
    )


# -- single-problem surface --


def _hyper_arrays(hyper: HyperChoice):
    return np.asarray(hyper.pi), np.asarray(hyper.sigma2), np.asarray(hyper.sigma2_beta)


def update_s2(problem: RegressionProblem, hyper: HyperChoice) -> NDArray[np.float64]:
    """Slab variances ``sigma2 / (1/sigma2_beta + sum_i w_i x_ik^2)``."""
    diag = np.einsum("i,ik,ik->k", problem.weights, problem.predictors, problem.predictors)
    _, sigma2, sb = _hyper_arrays(hyper)
    return _s2(diag, sigma2, sb)


def update_mu_batch(
    state: VariationalState, problem: RegressionProblem, hyper: HyperChoice
) -> NDArray[np.float64]:
    """One in-order sweep over the slab means; returns the new ``mu`` (state untouched)."""
    ss = problem.suff_stats()
    alpha, mu = state.alpha, state.mu.copy()
    ratio = state.s2 / hyper.sigma2
    diag = np.diagonal(ss.gram)
    gram_r = ss.gram @ (alpha * mu)
    for k in range(problem.n_predictors):
        r_old = alpha[k] * mu[k]
        mu[k] = ratio[k] * (ss.xty[k] - gram_r[k] + diag[k] * r_old)
        gram_r += ss.gram[:, k] * (alpha[k] * mu[k] - r_old)
    return mu


def update_alpha_batch(state: VariationalState, hyper: HyperChoice) -> NDArray[np.float64]:
    pi, sigma2, sb = _hyper_arrays(hyper)
    return _alpha(state.mu, state.s2, pi, sigma2, sb)


def elbo(state: VariationalState, problem: RegressionProblem, hyper: HyperChoice) -> float:
    """Closed-form ELBO of the factorised spike-and-slab family."""
    pi, sigma2, sb = _hyper_arrays(hyper)
    return float(_elbo(problem.suff_stats(), state.alpha, state.mu, state.s2, pi, sigma2, sb))


def fit(
    problem: RegressionProblem,
    hyper: HyperChoice,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    tol: float = DEFAULT_TOL,
) -> VariationalState:
    """Fit one weighted regression from ``alpha = pi, mu = 0``.

    Raises:
        NumericalFailureError: the ELBO turned non-finite; ``.sweep`` names the sweep.
    """
    res = fit_batch(
        problem.suff_stats(),
        hyper.pi,
        hyper.sigma2,
        hyper.sigma2_beta,
        max_sweeps=max_sweeps,
        tol=tol,
        record_trace=True,
    )
    if res.failed_sweep >= 0:
        raise NumericalFailureError(
            f"ELBO became non-finite at sweep {int(res.failed_sweep)}", sweep=int(res.failed_sweep)
        )
    iters = int(res.iterations)
    return VariationalState(
        alpha=res.alpha,
        mu=res.mu,
        s2=res.s2,
        elbo=float(res.elbo),
        iterations=iters,
        converged=bool(res.converged),
        sigma2=hyper.sigma2,
        elbo_trace=[float(v) for v in res.trace[: iters + 1]],
    )
