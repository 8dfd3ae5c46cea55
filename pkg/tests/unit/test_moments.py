"""
Tests for conditional moments and the separability classification
"""

import logging

import numpy as np
import pytest

from sepfilter.core.errors import SaturationError, UnsupportedDimensionError
from sepfilter.core.families import build_family
from sepfilter.core.filters import GaussianFilterState, ParticleCloud, SimplexFilterState
from sepfilter.core.moments import (
    classify,
    hat_coefficients,
    hat_exponential,
    hat_family,
    hat_monte_carlo,
    hat_quadratic,
    hat_quadratic_expansion,
    hat_quadrature,
    hat_simplex,
)
from sepfilter.presets import build_preset
from tests.factories import scalar_model

pytestmark = pytest.mark.unit


@pytest.mark.parametrize("m, P", [(0.0, 1.0), (0.7, 0.3), (-1.2, 2.5)])
def test_quadratic_closed_form_matches_quadrature(m, P):
    func = lambda x: 2.0 * x * x - 0.5 * x + 1.0  # noqa: E731
    expected = hat_quadrature(func, np.array([m]), np.array([[P]]))
    assert hat_quadratic(2.0, -0.5, 1.0, m, P) == pytest.approx(float(expected[0]), abs=1e-8)


@pytest.mark.parametrize("eta, m, P", [(1.0, 0.0, 1.0), (0.5, 0.4, 0.2), (-0.8, 1.0, 0.6)])
def test_exponential_closed_form_matches_quadrature(eta, m, P):
    expected = hat_quadrature(lambda x: np.exp(eta * x), np.array([m]), np.array([[P]]))
    assert hat_exponential(eta, m, P) == pytest.approx(float(expected[0]), rel=1e-8)


def test_closed_forms_refuse_vector_factors():
    with pytest.raises(UnsupportedDimensionError):
        hat_quadratic(1.0, 0.0, 0.0, np.zeros(2), np.eye(2))


def test_exponential_overflow_is_a_saturation_error():
    with pytest.raises(SaturationError) as info:
        hat_exponential(10.0, 80.0, 1.0)
    assert info.value.details["max_mean"] == 80.0


def test_quadratic_expansion_is_exact_for_quadratics():
    fam = build_family("c", {"family": "quadratic",
                             "params": {"const": [0.5], "lin": [[1.0, -1.0]],
                                        "quad": [[[1.0, 0.5], [0.5, 2.0]]]}}, (1,), 2, 1)
    m = np.array([0.3, -0.2])
    P = np.array([[0.4, 0.1], [0.1, 0.2]])
    y = np.zeros(1)
    closed = hat_quadratic_expansion(fam.evaluate_flat(0.0, m, y), fam.hessian_flat(0.0, m, y), P)
    numeric = hat_quadrature(lambda x: fam.evaluate_flat(0.0, x, y), m, P)
    np.testing.assert_allclose(closed, numeric, atol=1e-10)


def test_quadrature_of_a_gaussian_variance():
    m = np.array([0.5, -1.0])
    P = np.array([[1.0, 0.3], [0.3, 0.5]])
    second = hat_quadrature(lambda x: x[..., :1] * x[..., 1:], m, P)
    assert second[0] == pytest.approx(0.3 + 0.5 * -1.0, abs=1e-10)


def test_low_quadrature_order_warns(caplog):
    with caplog.at_level(logging.WARNING):
        hat_quadrature(lambda x: x, np.zeros(1), np.eye(1), order=3)
    assert "below" in caplog.text


def test_monte_carlo_fallback_reports_stderr():
    value, stderr = hat_monte_carlo(lambda x: x * x, np.zeros(1), np.eye(1), n_samples=4000)
    assert abs(value[0] - 1.0) < 5.0 * stderr[0]


def test_simplex_and_particle_hats():
    assert hat_simplex(np.array([1.0, 3.0]), np.array([0.25, 0.75])) == pytest.approx(2.5)
    fam = build_family("a", {"family": "linear", "params": {"const": [0.0], "x_coef": [[2.0]]}},
                       (1,), 1, 2)
    cloud = ParticleCloud(particles=np.array([[[0.0], [1.0]]]),
                          log_weights=np.log(np.array([[0.5, 0.5]])), rngs=[])
    np.testing.assert_allclose(hat_family(fam, 0.0, cloud, np.zeros((1, 2))), [[1.0]])
    simplex = SimplexFilterState(p=np.array([[0.2, 0.8]]))
    states = np.array([[-1.0], [1.0]])
    np.testing.assert_allclose(hat_family(fam, 0.0, simplex, np.zeros((1, 2)), states=states),
                               [[1.2]])


def test_hat_coefficients_on_the_linear_preset(linear_spec):
    state = GaussianFilterState(mean=np.array([[0.1], [0.3]]), cov=np.array([[0.25]]))
    a1, c, aY = hat_coefficients(linear_spec, 0.0, state, np.zeros((2, 2)))
    np.testing.assert_allclose(a1[:, 0], [0.15, 0.35])
    np.testing.assert_allclose(c, [0.02, 0.02])
    # Ito corrections: a - 1/2 sigma^2 and c - 1/2 xi^2
    np.testing.assert_allclose(aY[:, 0], [0.15 - 0.045, 0.35 - 0.045])
    np.testing.assert_allclose(aY[:, 1], [0.02 - 0.005, 0.02 - 0.005])


@pytest.mark.parametrize("name", ["linear-gaussian", "nagai2001", "bl-continuous", "davis-lleo-2021"])
def test_affine_models_are_strictly_separable(name):
    report = classify(build_preset(name))
    assert report.verdict == "strict"
    assert report.required_statistics == ["m"]


@pytest.mark.parametrize("name", ["linear-gaussian-quadratic-c", "general-nonlinear"])
def test_quadratic_and_exponential_coefficients_need_the_covariance(name):
    report = classify(build_preset(name))
    assert report.verdict == "wider"
    assert report.required_statistics == ["m", "Pi"]


def test_tabulated_drift_is_not_separable():
    report = classify(build_preset("linear-gaussian-tabulated-drift")).to_dict()
    assert report["verdict"] == "none"
    assert report["required_statistics"] == []
    assert {c["coefficient"]: c["case"] for c in report["coefficients"]}["a"] == "general"


def test_chain_models_need_the_probabilities(wonham_spec):
    report = classify(wonham_spec)
    assert report.verdict == "strict"
    assert report.required_statistics == ["p"]


def test_second_order_expansion_of_the_exponential():
    """e^x at m = 0, P = 0.01: 1 + 0.01 / 2"""
    value = hat_quadratic_expansion(np.array([1.0]), np.array([[[1.0]]]), np.array([[0.01]]))
    assert value[0] == pytest.approx(1.005, abs=1e-12)
    assert value[0] == pytest.approx(float(hat_exponential(1.0, 0.0, 0.01)), abs=1e-4)


class TestPointMassCollapse:
    """A degenerate filter returns the coefficient at the point mass."""

    def test_scalar_closed_forms(self):
        assert hat_quadratic(2.0, -0.5, 1.0, 0.7, 0.0) == pytest.approx(2.0 * 0.49 - 0.35 + 1.0)
        assert hat_exponential(-0.8, 1.3, 0.0) == pytest.approx(np.exp(-0.8 * 1.3))

    def test_quadrature_and_expansion(self):
        m = np.array([0.4, -1.1])
        P = np.zeros((2, 2))
        func = lambda x: np.sin(x[..., :1]) * np.exp(x[..., 1:])  # noqa: E731
        assert hat_quadrature(func, m, P)[0] == pytest.approx(np.sin(0.4) * np.exp(-1.1), abs=1e-12)
        hess = np.array([[[1.0, 0.5], [0.5, 2.0]]])
        np.testing.assert_allclose(hat_quadratic_expansion(np.array([0.3]), hess, P), [0.3])

    def test_one_hot_probabilities(self):
        f = np.array([1.0, 3.0, -2.0])
        for i in range(3):
            assert hat_simplex(f, np.eye(3)[i]) == pytest.approx(f[i])

    @pytest.mark.parametrize("block", [
        {"family": "quadratic", "params": {"const": [0.5], "lin": [[1.0]], "quad": [[[2.0]]]}},
        {"family": "exponential", "params": {"offset": [0.1], "scale": [0.5], "eta": [[0.7]]}},
        {"family": "tabulated", "params": {"grid": [-1.0, 0.0, 2.0], "values": [[0.0], [1.0], [3.0]]}},
    ])
    def test_families_under_a_zero_covariance(self, block):
        fam = build_family("c", block, (1,), 1, 2)
        state = GaussianFilterState(mean=np.array([[-0.4], [0.9]]), cov=np.zeros((1, 1)))
        y = np.zeros((2, 2))
        np.testing.assert_allclose(hat_family(fam, 0.0, state, y),
                                   fam.evaluate_flat(0.0, state.mean, y), atol=1e-12)

    def test_families_under_a_one_hot_chain(self):
        fam = build_family("a", {"family": "linear", "params": {"const": [0.1], "x_coef": [[2.0]]}},
                           (1,), 1, 2)
        simplex = SimplexFilterState(p=np.array([[1.0, 0.0], [0.0, 1.0]]))
        states = np.array([[-1.0], [1.0]])
        np.testing.assert_allclose(hat_family(fam, 0.0, simplex, np.zeros((2, 2)), states=states),
                                   [[-1.9], [2.1]])


def _rescaled(block, factor):
    params = {key: (value if key in ("grid", "eta") else (np.asarray(value) * factor).tolist())
              for key, value in block["params"].items()}
    return {"family": block["family"], "params": params}


@pytest.mark.parametrize("factor", [0.25, 4.0])
@pytest.mark.parametrize("c_block", [
    {"family": "constant", "params": {"value": [0.02]}},
    {"family": "linear", "params": {"const": [0.01], "x_coef": [[0.3]]}},
    {"family": "quadratic", "params": {"const": [0.01], "lin": [[0.0]], "quad": [[[0.5]]]}},
    {"family": "exponential", "params": {"offset": [0.0], "scale": [0.02], "eta": [[0.5]]}},
    {"family": "tabulated", "params": {"grid": [-1.0, 1.0], "values": [[0.0], [0.04]]}},
])
def test_classification_ignores_positive_rescaling(c_block, factor):
    base = classify(scalar_model(c=c_block)).to_dict()
    scaled = classify(scalar_model(c=_rescaled(c_block, factor))).to_dict()
    assert scaled["verdict"] == base["verdict"]
    assert scaled["required_statistics"] == base["required_statistics"]
    assert [c["case"] for c in scaled["coefficients"]] == [c["case"] for c in base["coefficients"]]
