"""
Tests for the error hierarchy and the structured error payload
"""

import pytest

from sepfilter.core.errors import (
    EXIT_NUMERICAL,
    EXIT_VALIDATION,
    BoundaryDomainError,
    CFLError,
    EstimationError,
    SepfilterError,
    SingularGramError,
    UnsupportedModelError,
    ValidationError,
    get_error_payload,
)

pytestmark = pytest.mark.unit


def test_validation_errors_exit_with_code_2():
    """Validation failures and their subclasses use exit code 2"""
    for exc in (ValidationError("bad"), UnsupportedModelError("nope")):
        assert exc.exit_code == EXIT_VALIDATION
        assert get_error_payload(exc)["exit_code"] == EXIT_VALIDATION


def test_numerical_errors_exit_with_code_3():
    """Numerical failures use exit code 3"""
    for exc in (SingularGramError("singular"), EstimationError("empty"),
                BoundaryDomainError("leak")):
        assert isinstance(exc, SepfilterError)
        assert get_error_payload(exc)["exit_code"] == EXIT_NUMERICAL


def test_payload_carries_details_and_category():
    """Keyword details end up in the payload next to the category"""
    payload = get_error_payload(ValidationError("unknown preset 'x'", available=["a", "b"]),
                                context="classify")
    assert payload["error"] == "unknown preset 'x'"
    assert payload["details"]["available"] == ["a", "b"]
    assert payload["details"]["category"] == "validation"
    assert payload["details"]["operation"] == "classify"


def test_cfl_error_reports_suggested_step():
    """The CFL error exposes the stable step both as attribute and in the payload"""
    exc = CFLError("step too large", suggested_dt=1e-4, rate=9000.0)
    assert exc.suggested_dt == 1e-4
    assert get_error_payload(exc)["details"]["suggested_dt"] == 1e-4


def test_unknown_exception_is_reported_as_internal():
    """Exceptions outside the hierarchy map to a numerical exit code"""
    payload = get_error_payload(RuntimeError("boom"))
    assert payload["exit_code"] == EXIT_NUMERICAL
    assert payload["details"]["category"] == "internal"
    assert payload["details"]["type"] == "RuntimeError"


def test_numpy_details_are_json_ready():
    """Array details are converted to plain lists"""
    np = pytest.importorskip("numpy")
    payload = get_error_payload(ValidationError("shape", got=np.array([2, 3])))
    assert payload["details"]["got"] == [2, 3]
