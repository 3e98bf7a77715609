"""Exception and warning classes shared across the package."""


class CorrFrailError(Exception):
    """Base class for all package errors."""


class SchemaError(CorrFrailError, ValueError):
    """A required column is missing or the column mapping is inconsistent."""


class RowValidationError(CorrFrailError, ValueError):
    """One or more input rows failed validation.

    Attributes
    ----------
    rows : list of int
        1-based data row numbers (header excluded) that failed.
    """

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = list(rows)


class SingularInformationError(CorrFrailError, ArithmeticError):
    """The observed information matrix is singular."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class ConvergenceError(CorrFrailError, RuntimeError):
    """An iterative fit failed to converge; ``trace`` holds its history."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class ExpansionTooLargeError(CorrFrailError, OverflowError):
    """The exact posterior expansion exceeds the configured term bound."""


class NoAdmissibleCutoffError(CorrFrailError, ValueError):
    """No candidate cutoff passes the admissibility rules."""


class BudgetExceededError(CorrFrailError, RuntimeError):
    """More runs were requested than the configured budget allows.

    Attributes
    ----------
    partial : list
        Results completed before the budget was hit.
    """

    def __init__(self, message, partial=()):
        super().__init__(message)
        self.partial = list(partial)


class UndefinedCorrelationError(CorrFrailError, ValueError):
    """A rank correlation was requested for a constant sequence."""


class MonotoneLikelihoodError(CorrFrailError, ArithmeticError):
    """A Cox fit inside a frailty model diverged (separation); its baseline is unusable."""


class MonotoneLikelihoodWarning(UserWarning):
    """A Cox coefficient diverged past the guard bound (separation)."""


class FewClustersWarning(UserWarning):
    """Too few clusters for reliable bootstrap intervals."""
