"""Exception types shared across the package."""


class SpecParseError(ValueError):
    """A covariate-function spec string could not be parsed."""


class DimensionError(ValueError):
    """Array shapes or covariate indices are inconsistent."""


class DataError(ValueError):
    """An observed sample fails a validity requirement."""


class SingularDesignError(ValueError):
    """A design or weighting matrix is numerically rank deficient."""


class EvaluationError(ValueError):
    """A numeric evaluation produced a non-finite result."""


class NonconvergenceError(RuntimeError):
    """An iterative fit failed to reach its convergence tolerance.

    Attributes:
        grad_norm: max-norm of the final gradient or residual, when known.
        iterations: iterations consumed before giving up.
    """

    def __init__(self, message, grad_norm=None, iterations=None,
                 best_beta=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations
        self.best_beta = best_beta
