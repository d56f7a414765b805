"""Exception and warning classes used across the package."""


class SchemaError(ValueError):
    """A CSV file does not match the requested column roles."""


class ParseError(ValueError):
    """A cell could not be parsed as a number."""


class DataValidationError(ValueError):
    """Input data violates a dataset invariant."""


class NumericalError(RuntimeError):
    """A linear system or decomposition could not be solved reliably."""


class NoInteractionSignalError(NumericalError):
    """The fitted links carry no slope information for an index update."""


class ConvergenceWarning(UserWarning):
    """An iterative fit stopped before meeting its tolerance."""


class ClampWarning(UserWarning):
    """Points were clamped to the spline domain."""
