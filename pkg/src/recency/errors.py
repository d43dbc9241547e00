"""Exception hierarchy shared by every module."""


class RecencyError(Exception):
    """Base class for all package errors."""


class DomainError(RecencyError, ValueError):
    """Input outside the mathematical domain of a function."""


class NumericError(RecencyError, ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class SeparationError(NumericError):
    """Logistic likelihood has no finite maximizer (perfect or quasi separation)."""


class RankError(NumericError):
    """Weighted normal equations are singular."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class PreconditionError(RecencyError, ValueError):
    """Data do not satisfy an estimator or fitter precondition."""


class DegenerateDesignError(PreconditionError):
    """Estimator denominator is zero or negative."""


class StratumError(PreconditionError):
    """A subtype stratum is empty or unusable."""


class ExtrapolationError(PreconditionError):
    """A record carries a covariate level or subtype the model never saw."""


class FeasibilityError(PreconditionError):
    """A population table violates the recent-mass constraint."""


class SchemaError(RecencyError, ValueError):
    """Malformed input file: missing column, bad value, wrong type."""
