"""
Custom exceptions for input validation and numerical failures
"""

from typing import Any, Optional


class HetrouteError(Exception):
    """Base exception for all hetroute errors"""

    exit_code: int = 3

    def __init__(self, message: str, error_code: Optional[str] = None, context: Optional[dict] = None):
        self.message = message
        self.error_code = error_code or "UNKNOWN_ERROR"
        self.context = context or {}
        super().__init__(self.message)

    def to_dict(self) -> dict:
        """Convert to dictionary for logging and JSON reports"""
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "error_code": self.error_code,
            "context": self.context,
        }


class ConfigurationError(HetrouteError):
    """Environment or run configuration errors"""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        context = {"field": field} if field else {}
        super().__init__(message, ErrorCodes.CONFIG_INVALID, context)


class GameFileError(HetrouteError):
    """Game, flow or toll file could not be read or parsed"""

    exit_code = 2

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
        field: Optional[str] = None,
    ):
        context = {
            "path": path,
            "line": line,
            "column": column,
            "field": field,
        }
        super().__init__(message, ErrorCodes.FILE_PARSE_FAILED, context)


class ValidationError(HetrouteError):
    """Input violates a model invariant"""

    exit_code = 2

    def __init__(self, message: str, invariant: Optional[str] = None, field: Optional[str] = None, value: Any = None):
        context = {
            "invariant": invariant,
            "field": field,
            "value": None if value is None else str(value),
        }
        super().__init__(message, ErrorCodes.VALIDATION_FAILED, context)


class CapExceededError(HetrouteError):
    """An enumeration grew past its configured cap"""

    exit_code = 2

    def __init__(self, message: str, what: str, cap: int, population: Optional[str] = None):
        context = {
            "what": what,
            "cap": cap,
            "population": population,
        }
        super().__init__(message, ErrorCodes.CAP_EXCEEDED, context)


class PreconditionError(HetrouteError):
    """Operation refused because its input does not satisfy a precondition"""

    exit_code = 2

    def __init__(self, message: str, operation: Optional[str] = None, reason: Optional[str] = None):
        context = {
            "operation": operation,
            "reason": reason,
        }
        super().__init__(message, ErrorCodes.PRECONDITION_FAILED, context)


class NumericalError(HetrouteError):
    """Non-finite values, integrator breakdown, eigen-solver failure"""

    exit_code = 3

    def __init__(self, message: str, operation: Optional[str] = None, error_code: Optional[str] = None, **context: Any):
        context = {"operation": operation, **context}
        super().__init__(message, error_code or ErrorCodes.NUMERICAL_FAILURE, context)


class NoConvergenceError(NumericalError):
    """Iterative solver hit its cap without reaching tolerance"""

    def __init__(self, message: str, residual: float, iterations: int, eta: Optional[float] = None):
        super().__init__(
            message,
            operation="find_fixed_point",
            error_code=ErrorCodes.NO_CONVERGENCE,
            residual=residual,
            iterations=iterations,
            eta=eta,
        )
        self.residual = residual
        self.iterations = iterations


class SingularSystemError(NumericalError):
    """Linear system in Newton or the continuation predictor is singular"""

    def __init__(self, message: str, operation: Optional[str] = None, condition: Optional[float] = None):
        super().__init__(
            message,
            operation=operation,
            error_code=ErrorCodes.SINGULAR_SYSTEM,
            condition=condition,
        )


# Error code constants
class ErrorCodes:
    """Error code constants for categorization"""

    # Configuration
    CONFIG_INVALID = "CONFIG_001"

    # Input
    FILE_PARSE_FAILED = "INPUT_001"
    VALIDATION_FAILED = "INPUT_002"
    CAP_EXCEEDED = "INPUT_003"
    PRECONDITION_FAILED = "INPUT_004"

    # Numerics
    NUMERICAL_FAILURE = "NUMERIC_001"
    NO_CONVERGENCE = "NUMERIC_002"
    SINGULAR_SYSTEM = "NUMERIC_003"
    STEP_UNDERFLOW = "NUMERIC_004"
    NON_FINITE = "NUMERIC_005"


def format_error_message(error: Exception) -> str:
    """
    Format error message for logging

    Args:
        error: Exception instance

    Returns:
        Formatted error message
    """
    if isinstance(error, HetrouteError):
        msg = f"[{error.error_code}] {error.message}"
        context = {k: v for k, v in error.context.items() if v is not None}
        if context:
            msg += f" | Context: {context}"
        return msg
    return f"[UNEXPECTED] {type(error).__name__}: {str(error)}"
