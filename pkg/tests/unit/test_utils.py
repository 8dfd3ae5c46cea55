"""
Tests for the numerical helpers
"""

import numpy as np
import pytest

from sepfilter.core.errors import NumericalError, SingularGramError
from sepfilter.core.utils import (
    LogMeanAccumulator,
    cluster_stream,
    gauss_hermite,
    gram_inverse,
    hill_tail_index,
    is_positive_definite,
    path_stream,
    psd_floor,
    psd_sqrt,
    unvech,
    vech,
)

pytestmark = pytest.mark.unit


def test_gauss_hermite_reproduces_normal_moments():
    """Order 20 integrates the first even moments of N(0, 1) exactly"""
    z, w = gauss_hermite(20)
    assert np.sum(w) == pytest.approx(1.0, abs=1e-13)
    assert np.sum(w * z ** 2) == pytest.approx(1.0, abs=1e-12)
    assert np.sum(w * z ** 4) == pytest.approx(3.0, abs=1e-11)


def test_psd_sqrt_of_diagonal_matrix():
    root = psd_sqrt(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(root, np.diag([2.0, 3.0]), atol=1e-12)


def test_psd_sqrt_is_batched():
    """Each matrix in a batch gets its own root"""
    A = np.stack([np.eye(2), 4.0 * np.eye(2)])
    root = psd_sqrt(A)
    np.testing.assert_allclose(root @ root, A, atol=1e-12)


def test_psd_sqrt_rejects_negative_eigenvalues():
    with pytest.raises(NumericalError):
        psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_psd_floor_clips_eigenvalues():
    floored = psd_floor(np.array([[1.0, 0.0], [0.0, -0.5]]))
    assert np.min(np.linalg.eigvalsh(floored)) >= -1e-15


def test_positive_definite_test_is_scale_free():
    """A tiny but well-conditioned matrix is still positive definite"""
    assert is_positive_definite(1e-12 * np.eye(3))
    assert not is_positive_definite(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_gram_inverse_and_root():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    inv, inv_sqrt = gram_inverse(G)
    np.testing.assert_allclose(inv @ G, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(inv_sqrt @ G @ inv_sqrt, np.eye(2), atol=1e-12)


def test_gram_inverse_rejects_singular_matrix():
    with pytest.raises(SingularGramError):
        gram_inverse(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_vech_packs_lower_triangle():
    A = np.array([[1.0, 2.0], [2.0, 5.0]])
    np.testing.assert_array_equal(vech(A), [1.0, 2.0, 5.0])
    np.testing.assert_array_equal(unvech(vech(A), 2), A)


def test_path_streams_are_reproducible_and_distinct():
    """Stream (seed, i) does not depend on how many other paths exist"""
    first = path_stream(7, 3).standard_normal(5)
    again = path_stream(7, 3).standard_normal(5)
    other = path_stream(7, 4).standard_normal(5)
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)
    assert not np.allclose(first, cluster_stream(7, 3).standard_normal(5))


class TestLogMeanAccumulator:
    def test_mean_of_plain_weights(self):
        acc = LogMeanAccumulator.from_log_weights(np.log([1.0, 2.0, 3.0, 4.0]))
        mean, stderr = acc.mean_and_stderr()
        assert mean == pytest.approx(2.5)
        assert stderr == pytest.approx(np.std([1.0, 2.0, 3.0, 4.0], ddof=1) / 2.0)

    def test_merge_matches_single_pass(self):
        """Merging chunks gives the same mean as one accumulator over everything"""
        logs = np.random.default_rng(3).normal(0.0, 2.0, size=1000)
        whole = LogMeanAccumulator.from_log_weights(logs)
        merged = LogMeanAccumulator()
        for chunk in np.array_split(logs, 7):
            merged = merged.merge(LogMeanAccumulator.from_log_weights(chunk))
        assert merged.count == whole.count
        assert merged.log_mean == pytest.approx(whole.log_mean, rel=1e-12)
        assert merged.relative_stderr == pytest.approx(whole.relative_stderr, rel=1e-9)

    def test_huge_log_weights_do_not_overflow(self):
        acc = LogMeanAccumulator.from_log_weights(np.array([1000.0, 1000.0]))
        assert acc.log_mean == pytest.approx(1000.0)

    def test_non_finite_weights_are_rejected(self):
        with pytest.raises(NumericalError):
            LogMeanAccumulator.from_log_weights(np.array([np.inf, 0.0]))

    def test_empty_accumulator_has_no_mean(self):
        assert np.isnan(LogMeanAccumulator().log_mean)


def test_hill_tail_index_recovers_pareto_exponent():
    """exp(E/3) with E ~ Exp(1) is Pareto with index 3"""
    logs = np.random.default_rng(5).exponential(1.0 / 3.0, size=100000)
    assert hill_tail_index(logs) == pytest.approx(3.0, abs=0.5)


def test_hill_tail_index_small_sample_is_infinite():
    assert hill_tail_index(np.zeros(5)) == float("inf")
