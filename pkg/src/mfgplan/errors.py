"""Exception hierarchy shared across the package."""


class MfgplanError(Exception):
    """Base class for all package errors."""


class ModelParseError(MfgplanError):
    """Raised on malformed model/problem/settings text, with position info."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ExpressionEvalError(MfgplanError):
    """Raised when an expression cannot be evaluated (division by zero, ...)."""

    def __init__(self, message, subexpr=None):
        self.subexpr = subexpr
        if subexpr is not None:
            message = f"{message} in subexpression '{subexpr}'"
        super().__init__(message)


class KolmogorovViolationError(MfgplanError):
    """Transition-rate matrix failed the zero-row-sum / sign contract."""


class GridMismatchError(MfgplanError):
    """Inputs that must share a time grid or action grid do not."""


class IntegrationOverflowError(MfgplanError):
    """A flow left the trusted numeric range during integration."""


class InfeasibleError(MfgplanError):
    """No optimizer start reached the terminal-constraint tolerance."""

    def __init__(self, message, best_gap=None):
        self.best_gap = best_gap
        super().__init__(message)


class GradientCheckError(MfgplanError):
    """Adjoint gradient disagreed with the finite-difference probe."""


class EnumerationBoundError(MfgplanError):
    """Brute-force enumeration request exceeds the hard size guard."""
