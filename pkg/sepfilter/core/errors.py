"""
Error Types for the Separation Filtering Toolkit
================================================

Exception hierarchy shared by every numerical module, plus the helper that
turns an exception into the machine-readable payload written by the CLI.

Exit-code contract:
- 0: success
- 2: validation failure (bad scenario, spec, parameters or unsupported setup)
- 3: numerical failure (singular Gram matrix, overflow, CFL violation, ...)
"""

import logging
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class SepfilterError(Exception):
    """Base error carrying structured details for the error payload."""

    exit_code = EXIT_NUMERICAL
    category = "error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_error_dict(self) -> Dict[str, Any]:
        return get_error_payload(self)


class ValidationError(SepfilterError):
    """Scenario, model or parameter inputs violate a declared invariant."""

    exit_code = EXIT_VALIDATION
    category = "validation"


class ShapeError(ValidationError):
    """Coefficient output does not match the declared dimensions."""

    category = "shape"


class AlignmentError(ValidationError):
    """Filter trajectory and observation paths live on different grids."""

    category = "alignment"


class UnsupportedModelError(ValidationError):
    """The requested operation does not cover this model class."""

    category = "unsupported_model"


class UnsupportedDimensionError(ValidationError):
    """Closed form is only available in a lower dimension."""

    category = "unsupported_dimension"


class NumericalError(SepfilterError):
    """A numerical step could not be carried out."""

    exit_code = EXIT_NUMERICAL
    category = "numerical"


class SingularGramError(NumericalError):
    category = "singular_gram"


class SaturationError(NumericalError):
    """Exponential moment overflowed the floating point range."""

    category = "saturation"


class DegenerateLikelihoodError(NumericalError):
    category = "degenerate_likelihood"


class EstimationError(NumericalError):
    """No usable Monte-Carlo path remained."""

    category = "estimation"


class CFLError(NumericalError):
    """Explicit step violates the stability bound."""

    category = "cfl"

    def __init__(self, message: str, suggested_dt: float, **details: Any) -> None:
        super().__init__(message, suggested_dt=suggested_dt, **details)
        self.suggested_dt = suggested_dt


class BoundaryDomainError(NumericalError):
    category = "boundary_domain"


def get_error_payload(exc: BaseException, context: Optional[str] = None) -> Dict[str, Any]:
    """Build the structured error response written as ``error.json``.

    Args:
        exc: The raised exception.
        context: Optional label of the operation that failed (subcommand name).

    Returns:
        dict: ``{'error': ..., 'details': {...}, 'exit_code': ...}``. Unknown
        exception types are reported as numerical failures.
    """
    if isinstance(exc, SepfilterError):
        details = {key: _jsonable(value) for key, value in exc.details.items()}
        details["category"] = exc.category
        exit_code = exc.exit_code
        message = exc.message
    else:
        details = {"category": "internal", "type": type(exc).__name__}
        exit_code = EXIT_NUMERICAL
        message = str(exc)
    if context:
        details["operation"] = context
    return {"error": message, "details": details, "exit_code": exit_code}


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)
