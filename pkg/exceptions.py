"""
Error hierarchy for the Dirichlet regression engine and the CLI exit-code map.
"""

from typing import Any, Dict, List, Optional


class DirichletRegressionError(Exception):
    """Base class for all errors raised by this package"""


class DomainError(DirichletRegressionError, ValueError):
    """Value outside the mathematical domain of an operation"""


class SimplexError(DomainError):
    """Composition columns that do not sum to one"""


class ParseError(DirichletRegressionError, ValueError):
    """Malformed formula text"""

    def __init__(self, message: str, position: int = -1):
        self.position = position
        if position >= 0:
            message = f"{message} (at position {position})"
        super().__init__(message)


class ArityError(DirichletRegressionError, ValueError):
    """Block or coefficient count does not match the category count"""


class ValidationError(DirichletRegressionError, ValueError):
    """Invalid configuration or model specification"""


class CovariateLookupError(DirichletRegressionError, KeyError):
    """A formula references a covariate the table does not contain"""

    def __str__(self):
        return str(self.args[0]) if self.args else ''


class ShapeError(DirichletRegressionError, ValueError):
    """Array dimensions disagree"""


class NumericRangeError(DirichletRegressionError, ArithmeticError):
    """Linear predictor outside the overflow guard"""


class NonPositiveDefiniteError(DirichletRegressionError, ArithmeticError):
    """Hessian block could not be factorized even after the expected-Hessian fallback"""


class NonConvergenceError(DirichletRegressionError, RuntimeError):
    """Mode search hit its iteration limit"""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trace = trace or []


class SchemaError(DirichletRegressionError, ValueError):
    """Input file does not follow the expected CSV/JSON schema"""


class DataIOError(DirichletRegressionError, OSError):
    """Input could not be read or output could not be written"""


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NON_CONVERGENCE = 3
EXIT_IO = 4

_VALIDATION_ERRORS = (
    DomainError, ParseError, ArityError, ValidationError,
    CovariateLookupError, ShapeError, SchemaError,
)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit code"""
    if isinstance(exc, NonConvergenceError):
        return EXIT_NON_CONVERGENCE
    if isinstance(exc, _VALIDATION_ERRORS):
        return EXIT_VALIDATION
    if isinstance(exc, (DataIOError, OSError)):
        return EXIT_IO
    return 1
