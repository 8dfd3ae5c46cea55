"""
Tests for the coefficient family registry
"""

import numpy as np
import pytest

from sepfilter.core.errors import ShapeError, ValidationError
from sepfilter.core.families import (
    AffineMap,
    ConstantMap,
    ExponentialMap,
    QuadraticMap,
    TabulatedMap,
    build_family,
)

pytestmark = pytest.mark.unit

N, MY = 2, 3


def _points(batch=(4,)):
    rng = np.random.default_rng(0)
    return rng.normal(size=batch + (N,)), rng.normal(size=batch + (MY,))


def test_missing_block_is_zero():
    fam = build_family("c", None, (1,), N, MY)
    x, y = _points()
    assert isinstance(fam, ConstantMap)
    np.testing.assert_array_equal(fam.evaluate(0.0, x, y), np.zeros((4, 1)))
    assert not fam.depends_on_x


def test_linear_family_evaluates_and_differentiates():
    fam = build_family("a", {"family": "linear",
                             "params": {"const": [1.0, 2.0], "x_coef": [[1.0, 0.0], [0.5, -1.0]],
                                        "t_coef": [0.1, 0.0]}}, (2,), N, MY)
    assert isinstance(fam, AffineMap) and fam.structure_tag == "linear"
    x, y = _points()
    expected = np.array([1.0, 2.0]) + x @ np.array([[1.0, 0.0], [0.5, -1.0]]).T + [0.2, 0.0]
    np.testing.assert_allclose(fam.evaluate(2.0, x, y), expected)
    np.testing.assert_allclose(fam.jacobian_flat(0.0, x, y)[0], [[1.0, 0.0], [0.5, -1.0]])
    assert fam.depends_on_x and not fam.depends_on_y


def test_linear_family_with_y_dependence():
    fam = build_family("b", {"family": "linear",
                             "params": {"const": [0.0, 0.0], "x_coef": np.zeros((2, N)).tolist(),
                                        "y_coef": [[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]]}},
                       (2,), N, MY)
    x, y = _points()
    np.testing.assert_allclose(fam.evaluate(0.0, x, y), np.stack([y[:, 0], 2.0 * y[:, 2]], axis=-1))
    assert fam.depends_on_y and not fam.depends_on_x


def test_matrix_shaped_constant_restores_shape():
    """Flat evaluation is reshaped to the declared matrix shape"""
    value = np.arange(6.0).reshape(2, 3)
    fam = build_family("sigma", {"family": "constant", "params": {"value": value.tolist()}},
                       (2, 3), N, MY)
    x, y = _points((5,))
    out = fam.evaluate(0.0, x, y)
    assert out.shape == (5, 2, 3)
    np.testing.assert_array_equal(out[3], value)


def test_quadratic_family_hessian_is_symmetrized():
    quad = [[[1.0, 2.0], [0.0, 3.0]]]
    fam = build_family("c", {"family": "quadratic",
                             "params": {"const": [0.5], "lin": [[1.0, -1.0]], "quad": quad}},
                       (1,), N, MY)
    assert isinstance(fam, QuadraticMap)
    x = np.array([[1.0, 2.0]])
    y = np.zeros((1, MY))
    assert fam.evaluate_flat(0.0, x, y)[0, 0] == pytest.approx(0.5 + 1.0 - 2.0 + 1.0 + 4.0 + 12.0)
    np.testing.assert_allclose(fam.hessian_flat(0.0, x, y)[0, 0], [[2.0, 2.0], [2.0, 6.0]])
    np.testing.assert_allclose(fam.jacobian_flat(0.0, x, y)[0, 0], [1.0 + 2.0 + 4.0, -1.0 + 2.0 + 12.0])


def test_exponential_family_jacobian_matches_finite_difference():
    fam = build_family("a", {"family": "exponential",
                             "params": {"offset": [0.1], "scale": [0.2], "eta": [[0.5, -0.3]]}},
                       (1,), N, MY)
    assert isinstance(fam, ExponentialMap)
    x = np.array([[0.4, -0.7]])
    y = np.zeros((1, MY))
    h = 1e-6
    fd = [(fam.evaluate_flat(0.0, x + h * e, y) - fam.evaluate_flat(0.0, x - h * e, y))[0, 0] / (2 * h)
          for e in np.eye(N)]
    np.testing.assert_allclose(fam.jacobian_flat(0.0, x, y)[0, 0], fd, rtol=1e-6)


def test_tabulated_family_interpolates():
    fam = build_family("a", {"family": "tabulated",
                             "params": {"grid": [-1.0, 0.0, 1.0], "values": [[0.0], [1.0], [4.0]]}},
                       (1,), 1, 2)
    assert isinstance(fam, TabulatedMap) and fam.structure_tag == "general"
    x = np.array([[-0.5], [0.5]])
    y = np.zeros((2, 2))
    np.testing.assert_allclose(fam.evaluate_flat(0.0, x, y)[:, 0], [0.5, 2.5])
    np.testing.assert_allclose(fam.jacobian_flat(0.0, x, y)[:, 0, 0], [1.0, 3.0], rtol=1e-6)


def test_tabulated_family_needs_scalar_state():
    with pytest.raises(ValidationError):
        build_family("a", {"family": "tabulated",
                           "params": {"grid": [0.0, 1.0], "values": [[0.0], [1.0]]}}, (1,), 2, 2)


def test_unknown_family_is_rejected():
    with pytest.raises(ValidationError, match="Unknown coefficient family"):
        build_family("a", {"family": "spline", "params": {}}, (1,), N, MY)


def test_parameter_size_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError):
        build_family("a", {"family": "linear", "params": {"const": [1.0, 2.0], "x_coef": [[1.0, 0.0]]}},
                     (2,), N, MY)


def test_missing_required_parameter():
    with pytest.raises(ValidationError, match="missing parameter 'scale'"):
        build_family("a", {"family": "exponential", "params": {"eta": [[1.0, 0.0]]}}, (1,), N, MY)
