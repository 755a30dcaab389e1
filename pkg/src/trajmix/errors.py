"""Exception hierarchy.

The CLI maps :class:`SchemaError` to exit code 2 and
:class:`EstimationError` (and subclasses) to exit code 3.
"""


class TrajmixError(Exception):
    """Base class for package errors."""


class SchemaError(TrajmixError, ValueError):
    """Input data do not conform to the declared file format or schema."""


class EstimationError(TrajmixError, RuntimeError):
    """A model could not be estimated."""


class EmptyGroupError(EstimationError):
    """A mixing proportion fell below the floor and the restart budget ran out."""


class SeparationError(EstimationError):
    """Quasi-complete separation in a multinomial-logit fit."""

    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class RankDeficiencyError(EstimationError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingularMatrixError(EstimationError):
    """Information or Hessian matrix could not be inverted."""
