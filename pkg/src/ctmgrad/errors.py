"""Exception hierarchy shared across the package."""


class CtmGradError(Exception):
    """Base class for all package errors."""


class ShapeError(CtmGradError, ValueError):
    """Inconsistent or unsupported tensor shapes."""


class NumericError(CtmGradError, ArithmeticError):
    """A numerical routine failed (rank deficiency, singular input, ...)."""


class NonConvergenceError(NumericError):
    """An iterative method stopped before reaching its tolerance.

    ``residual`` holds the last measured residual (or distance) and
    ``iterations`` the number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class GaugeFixingError(NumericError):
    """No gauge transformation relating two edge tensors could be found."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class SchemeInapplicableError(GaugeFixingError):
    """The requested gauge-fixing scheme does not apply to this input."""


class SeriesDivergenceError(NonConvergenceError):
    """The fixed-point adjoint series grew instead of converging."""


class StageError(CtmGradError):
    """Wraps an upstream failure with the pipeline stage it occurred in."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
