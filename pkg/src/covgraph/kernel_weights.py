"""Gaussian-kernel covariate weights and adaptive per-individual bandwidths.

The weight an individual ``i`` receives when estimating the graph of anchor
``l`` is the Gaussian kernel of their covariate distance, rescaled so the
anchor's own weight is exactly one::

    w_l(z_i) = exp(-||z_i - z_l||^2 / (2 tau_l^2))

Bandwidths come from a two-step kernel density procedure: a Silverman pilot
bandwidth ``h`` and a pilot density estimate ``k(z)``, giving
``tau_i = h / sqrt(k(z_i))`` (wider kernels where covariates are sparse).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from covgraph.errors import DegenerateCovariateError, InvalidArgumentError

SILVERMAN_CONSTANT = 1.06


def as_covariates(covariates: ArrayLike) -> NDArray[np.float64]:
    """Coerce to an ``(n, d)`` float matrix; a 1-d input is one covariate column."""
    z = np.asarray(covariates, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[1] < 1:
        raise InvalidArgumentError(f"covariates must be an (n, d) matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("covariates contain non-finite entries")
    return z


def kernel_weight(anchor: ArrayLike, other: ArrayLike, tau: float) -> float:
    """Unit-peak Gaussian kernel weight of ``other`` relative to ``anchor``."""
    a = np.atleast_1d(np.asarray(anchor, dtype=np.float64))
    b = np.atleast_1d(np.asarray(other, dtype=np.float64))
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("covariate points must be finite")
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidArgumentError(f"tau must be positive and finite, got {tau!r}")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (2.0 * tau * tau)))


def silverman_bandwidth(covariates: ArrayLike, dim: int = 0) -> float:
    """Rule-of-thumb bandwidth ``1.06 * sd * n^(-1/5)`` for one covariate column."""
    z = as_covariates(covariates)
    n = z.shape[0]
    if n < 2:
        raise DegenerateCovariateError(f"need at least 2 individuals, got {n}")
    sd = float(np.std(z[:, dim], ddof=1))
    if not sd > 0:
        raise DegenerateCovariateError(f"covariate column {dim} has zero variance")
    return SILVERMAN_CONSTANT * sd * n ** (-0.2)


def pooled_pilot_bandwidth(covariates: ArrayLike) -> float:
    """Harmonic mean of the per-column Silverman bandwidths (constant columns skipped)."""
    z = as_covariates(covariates)
    if z.shape[0] < 2:
        raise DegenerateCovariateError(f"need at least 2 individuals, got {z.shape[0]}")
    hs = []
    for dim in range(z.shape[1]):
        try:
            hs.append(silverman_bandwidth(z, dim))
        except DegenerateCovariateError:
            continue
    if not hs:
        raise DegenerateCovariateError("every covariate column is constant")
    hs = np.asarray(hs)
    return float(len(hs) / np.sum(1.0 / hs))


def pilot_density(covariates: ArrayLike, h: float) -> NDArray[np.float64]:
    """Product-Gaussian kernel density estimate evaluated at every covariate row."""
    z = as_covariates(covariates)
    n, d = z.shape
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    norm = (2.0 * np.pi * h * h) ** (-d / 2.0)
    return norm * np.exp(-d2 / (2.0 * h * h)).mean(axis=1)


def adaptive_bandwidths(covariates: ArrayLike) -> NDArray[np.float64]:
    """Per-individual bandwidths ``tau_i = h / sqrt(k(z_i))``.

    Raises:
        DegenerateCovariateError: if every covariate column is constant.
    """
    z = as_covariates(covariates)
    h = pooled_pilot_bandwidth(z)
    k = pilot_density(z, h)
    tau = h / np.sqrt(k)
    if not np.all(np.isfinite(tau) & (tau > 0)):
        raise DegenerateCovariateError("pilot density underflowed; bandwidths are not finite")
    return tau


@dataclass(frozen=True)
class WeightPlan:
    """Row ``l`` holds the weights of every individual relative to anchor ``l``.

    ``tau`` is ``None`` in covariate-free mode.
    """

    weights: NDArray[np.float64]
    tau: NDArray[np.float64] | None
    normalized: bool = True

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def covariate_free(self) -> bool:
        return self.tau is None


def standardize_columns(covariates: ArrayLike) -> NDArray[np.float64]:
    """Scale each non-constant column to unit sample standard deviation."""
    z = as_covariates(covariates)
    sd = np.std(z, axis=0, ddof=1) if z.shape[0] > 1 else np.ones(z.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return (z - z.mean(axis=0)) / sd


def build_weight_plan(
    covariates: ArrayLike | None = None,
    tau: ArrayLike | float | None = None,
    *,
    covariate_free: bool = False,
    n: int | None = None,
    standardize: bool = False,
) -> WeightPlan:
    """Assemble the ``n x n`` weight matrix.

    Args:
        covariates: ``(n, d)`` covariate matrix; may be omitted in covariate-free mode.
        tau: per-anchor bandwidth vector, or a scalar applied to every anchor.
            Defaults to :func:`adaptive_bandwidths`.
        covariate_free: return the all-ones plan.
        n: number of individuals, required only when ``covariate_free`` and no
            covariates are given.
        standardize: rescale covariate columns to unit sd before measuring distances.
    """
    if covariate_free:
        if covariates is not None:
            n = as_covariates(covariates).shape[0]
        if n is None or n < 1:
            raise InvalidArgumentError("covariate-free mode needs n or covariates")
        return WeightPlan(np.ones((n, n)), None, True)
    if covariates is None:
        raise InvalidArgumentError("covariates are required unless covariate_free=True")

    z = as_covariates(covariates)
    if standardize:
        z = standardize_columns(z)
    n = z.shape[0]
    if tau is None:
        tau_vec = adaptive_bandwidths(z)
    else:
        tau_vec = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(tau_vec) & (tau_vec > 0)):
        raise InvalidArgumentError("bandwidths must be positive and finite")

    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    weights = np.exp(-d2 / (2.0 * tau_vec[:, None] ** 2))
    return WeightPlan(weights, tau_vec, True)
