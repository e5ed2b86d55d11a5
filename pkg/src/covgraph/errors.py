"""Exception hierarchy shared by all modules."""


class CovgraphError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(CovgraphError, ValueError):
    pass


class DegenerateCovariateError(CovgraphError, ValueError):
    """A covariate column has zero spread, so no bandwidth can be formed.

    Callers usually fall back to covariate-free mode (all weights one).
    """


class NumericalFailureError(CovgraphError, ArithmeticError):
    """The ELBO became non-finite during coordinate ascent."""

    def __init__(self, message: str, sweep: int | None = None, task: tuple | None = None):
        super().__init__(message)
        self.sweep = sweep
        self.task = task


class SelectionFailureError(CovgraphError):
    """Every cell of a hyperparameter grid failed numerically."""


class UndefinedMetricError(CovgraphError, ValueError):
    pass


class ParseError(CovgraphError, ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        if line is not None:
            message = f"{path or '<input>'}:{line}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line
