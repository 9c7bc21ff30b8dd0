"""Exception and warning types raised by the package."""


class TwoPhaseError(Exception):
    """Base class for all package errors."""


class InputError(TwoPhaseError, ValueError):
    """Malformed or inconsistent input values."""


class DomainError(TwoPhaseError, ValueError):
    """A parameter lies outside its admissible domain."""


class DegenerateConditioningError(TwoPhaseError):
    """The selection-conditioned outcome law has (numerically) no mass.

    Raised for case-only designs and for vanishing normalizing integrals.
    """


class NumericError(TwoPhaseError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SingularMatrixError(TwoPhaseError, ArithmeticError):
    """A matrix that must be inverted is exactly singular."""


class IllConditionedWarning(RuntimeWarning):
    """A linear system was solved with a large condition number."""


class WrongVariantError(TwoPhaseError):
    """The requested constraint function does not apply to this design."""


class InfeasibleConstraintsError(TwoPhaseError):
    """Zero is not in the interior of the convex hull of constraint rows."""


class ConvergenceError(TwoPhaseError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class RankDeficiencyError(TwoPhaseError):
    """The stacked constraint matrix is rank deficient."""


class EstimationError(TwoPhaseError):
    """A nuisance fit (working or selection model) could not be computed."""


class DataError(TwoPhaseError):
    """A data file violates the schema; carries the offending location."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(TwoPhaseError):
    """Invalid run configuration."""
