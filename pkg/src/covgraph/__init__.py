"""Covariate-dependent Gaussian graphical models via weighted pseudo-likelihood."""

from covgraph.errors import (
    CovgraphError,
    DegenerateCovariateError,
    InvalidArgumentError,
    NumericalFailureError,
    ParseError,
    SelectionFailureError,
    UndefinedMetricError,
)
from covgraph.graph import FitRequest, GraphEstimate, estimate_all
from covgraph.hyperparam import AveragedFit, HyperGrid, default_grid
from covgraph.kernel_weights import WeightPlan, adaptive_bandwidths, build_weight_plan
from covgraph.vi_core import HyperChoice, RegressionProblem, VariationalState, fit

__version__ = "0.1.0"

__all__ = [
    "AveragedFit",
    "CovgraphError",
    "DegenerateCovariateError",
    "FitRequest",
    "GraphEstimate",
    "HyperChoice",
    "HyperGrid",
    "InvalidArgumentError",
    "NumericalFailureError",
    "ParseError",
    "RegressionProblem",
    "SelectionFailureError",
    "UndefinedMetricError",
    "VariationalState",
    "WeightPlan",
    "adaptive_bandwidths",
    "build_weight_plan",
    "default_grid",
    "estimate_all",
    "fit",
]
