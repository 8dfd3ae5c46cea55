"""
Tests for the model specification, validation and observation assembly
"""

import numpy as np
import pytest

from sepfilter.core.errors import ValidationError
from sepfilter.core.model import (
    Dimensions,
    assemble_observation,
    model_from_dict,
    observation_affine_parts,
    observation_geometry,
    observation_jacobian,
    validate,
)
from sepfilter.presets import build_preset
from tests.factories import scalar_block, scalar_model

pytestmark = pytest.mark.unit


def _invariants(report):
    return {v.invariant for v in report.violations}


def test_dimensions_follow_the_counts():
    dims = Dimensions(ell=1, n=2, m=3, m1=2, k=1)
    assert dims.d == 1 + 2 + 3 + 1 + 1
    assert dims.mY == 1 + 3 + 1 + 1
    assert dims.m2 == 1
    assert dims.benchmark_row == 4


def test_dimensions_reject_too_many_tradable_assets():
    with pytest.raises(ValidationError):
        Dimensions(ell=0, n=1, m=1, m1=2, k=0)


def test_linear_preset_is_valid(linear_spec):
    report = validate(linear_spec)
    assert report.ok
    assert report.n_points == 27
    assert linear_spec.dims.d == 3 and linear_spec.dims.mY == 2


def test_observation_drift_carries_ito_corrections():
    """a^Y = (a - 1/2 diag(Sigma Sigma'), c - 1/2 |Xi|^2)"""
    spec = scalar_model()
    aY, SY = assemble_observation(spec, 0.0, np.array([1.0]), spec.y0)
    np.testing.assert_allclose(aY, [1.05 - 0.5 * 0.09, 0.02 - 0.5 * 0.01])
    np.testing.assert_allclose(SY, [[0.0, 0.3, 0.0], [0.0, 0.0, 0.1]])


def test_observation_affine_parts_and_jacobian_agree():
    spec = scalar_model()
    a0, A = observation_affine_parts(spec, 0.0, spec.y0)
    np.testing.assert_allclose(a0, [0.05 - 0.045, 0.015])
    np.testing.assert_allclose(A, [[1.0], [0.0]])
    jac = observation_jacobian(spec, 0.0, np.array([0.3]), spec.y0)
    np.testing.assert_allclose(jac, A)


def test_batched_observation_drift():
    spec = scalar_model()
    x = np.linspace(-1.0, 1.0, 5)[:, None]
    y = np.zeros((5, 2))
    aY, _ = assemble_observation(spec, 0.0, x, y)
    assert aY.shape == (5, 2)
    np.testing.assert_allclose(aY[:, 0], 0.005 + x[:, 0])


def test_wealth_based_model_drops_the_benchmark_row():
    """A zero benchmark volatility row is inactive and left out of the Gram matrix"""
    spec = build_preset("nagai2001")
    np.testing.assert_array_equal(spec.active_rows, [True, True, False])
    geo = observation_geometry(spec, 0.0)
    assert geo.gram.shape == (2, 2)
    np.testing.assert_allclose(geo.gram_inv @ geo.gram, np.eye(2), atol=1e-12)


def test_validate_reports_singular_asset_volatility():
    spec = scalar_model(sigma={"family": "constant", "params": {"value": [[0.0, 0.0, 0.0]]}})
    report = validate(spec)
    assert not report.ok
    assert "ΣΣ' singular" in _invariants(report)


def test_validate_reports_state_dependent_observed_diffusion():
    spec = scalar_model(sigma={"family": "linear",
                               "params": {"const": [[0.0, 0.3, 0.0]],
                                          "x_coef": [[[0.0], [0.1], [0.0]]]}})
    report = validate(spec)
    assert "observed diffusion depends on x" in _invariants(report)


def test_validate_reports_noiseless_row_revealing_the_state():
    spec = scalar_model(xi=None, c={"family": "linear",
                                    "params": {"const": [0.02], "x_coef": [[0.5]]}})
    report = validate(spec)
    assert "inactive observation row drift depends on x" in _invariants(report)


def test_validate_reports_bad_generator():
    block = {
        "dims": {"n": 1, "m": 1}, "horizon": 1.0, "y0": [0.0, 0.0],
        "x0": {"states": [[-0.5], [0.5]], "probs": [0.5, 0.5]},
        "generator": [[-1.0, 2.0], [1.0, -1.0]],
        "a": {"family": "linear", "params": {"const": [0.05], "x_coef": [[0.4]]}},
        "sigma": {"family": "constant", "params": {"value": [[0.0, 0.2, 0.0]]}},
        "xi": {"family": "constant", "params": {"value": [[0.0, 0.0, 0.1]]}},
    }
    report = validate(model_from_dict(block))
    assert _invariants(report) == {"generator invalid"}


def test_validation_report_serializes_and_raises():
    spec = scalar_model(y0=[0.0])
    report = validate(spec)
    payload = report.to_dict()
    assert payload["ok"] is False
    assert payload["violations"][0]["subject"] == "y0"
    with pytest.raises(ValidationError) as excinfo:
        report.raise_if_failed(spec.name)
    assert excinfo.value.details["report"]["ok"] is False


def test_model_block_needs_dims():
    with pytest.raises(ValidationError, match="dims"):
        model_from_dict({"horizon": 1.0})


def test_explicit_name_overrides_block_name():
    spec = model_from_dict(scalar_block(), name="renamed")
    assert spec.name == "renamed"
    assert not spec.is_chain and not spec.diffusion_depends_on_y
