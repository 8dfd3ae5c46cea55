#!/usr/bin/env python3
"""
Numerical Utilities
===================

Helpers shared by the filters, estimators and the density solver.

Features:
- Symmetric PSD square roots, inverse roots and eigenvalue floors (batched)
- Scale-free positive-definiteness test
- vech / unvech packing of covariance matrices
- Gauss-Hermite nodes for standard normal expectations
- Counter-based per-path random streams
- Log-space mean accumulator with associative merge
- Hill tail-index estimate on log-weights
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from sepfilter.core.errors import NumericalError, SingularGramError

# Configure logger
logger = logging.getLogger(__name__)

PD_RTOL = 1e-10
CLUSTER_STREAM_TAG = 7919
PARTICLE_STREAM_TAG = 104729


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def psd_floor(A: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Symmetrize and clip eigenvalues of (batched) square matrices at ``floor``."""
    A = symmetrize(A)
    if A.shape[-1] == 1:
        return np.maximum(A, floor)
    vals, vecs = np.linalg.eigh(A)
    if np.all(vals >= floor):
        return A
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2))


def psd_sqrt(A: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Args:
        A: Array of shape (..., n, n).
        name: Label used in the error message.

    Returns:
        np.ndarray: Symmetric root with the same shape as ``A``.

    Raises:
        NumericalError: If an eigenvalue is below -1e-10 times the trace.
    """
    A = symmetrize(np.asarray(A, dtype=float))
    vals, vecs = np.linalg.eigh(A)
    scale = np.maximum(np.abs(np.trace(A, axis1=-2, axis2=-1)), np.finfo(float).tiny)
    if np.any(vals < -PD_RTOL * scale[..., None]):
        raise NumericalError(
            f"{name} is not positive semi-definite",
            min_eigenvalue=float(np.min(vals)),
        )
    root = np.sqrt(np.maximum(vals, 0.0))
    return (vecs * root[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def is_positive_definite(A: np.ndarray, rtol: float = PD_RTOL) -> bool:
    """Smallest eigenvalue above ``rtol`` times the largest, for every matrix in the batch."""
    A = symmetrize(np.asarray(A, dtype=float))
    if A.shape[-1] == 0:
        return True
    vals = np.linalg.eigvalsh(A)
    top = vals[..., -1]
    return bool(np.all((top > 0) & (vals[..., 0] > rtol * top)))


def gram_inverse(G: np.ndarray, name: str = "Sigma^Y Sigma^Y' Gram matrix") -> Tuple[np.ndarray, np.ndarray]:
    """Inverse and inverse symmetric root of a (batched) Gram matrix.

    Raises:
        SingularGramError: If the matrix fails the scale-free PD test.
    """
    G = symmetrize(G)
    if G.shape[-1] == 0:
        return G.copy(), G.copy()
    vals, vecs = np.linalg.eigh(G)
    top = vals[..., -1]
    if np.any(top <= 0) or np.any(vals[..., 0] <= PD_RTOL * top):
        raise SingularGramError(
            f"{name} is singular",
            min_eigenvalue=float(np.min(vals)),
            max_eigenvalue=float(np.max(top)),
        )
    vt = np.swapaxes(vecs, -1, -2)
    inv = (vecs / vals[..., None, :]) @ vt
    inv_sqrt = (vecs / np.sqrt(vals)[..., None, :]) @ vt
    return symmetrize(inv), symmetrize(inv_sqrt)


def vech(A: np.ndarray) -> np.ndarray:
    """Stack the lower triangle (row-major) of the trailing two axes."""
    n = A.shape[-1]
    rows, cols = np.tril_indices(n)
    return A[..., rows, cols]


def unvech(v: np.ndarray, n: int) -> np.ndarray:
    rows, cols = np.tril_indices(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., rows, cols] = v
    out[..., cols, rows] = v
    return out


def gauss_hermite(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[f(Z)], Z ~ N(0, 1)."""
    knots, weights = np.polynomial.hermite.hermgauss(order)
    return knots * np.sqrt(2.0), weights / np.sqrt(np.pi)


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """Independent Philox stream for one Monte-Carlo path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index])))


def cluster_stream(seed: int, cluster_index: int) -> np.random.Generator:
    """Stream shared by every path of one common-noise cluster."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, cluster_index, CLUSTER_STREAM_TAG]))
    )


def particle_stream(seed: int, path_index: int) -> np.random.Generator:
    """Stream for the particle cloud that filters one observation path."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, path_index, PARTICLE_STREAM_TAG]))
    )


@dataclass
class LogMeanAccumulator:
    """Running mean of exp(L_i) kept in log space.

    ``sum`` and ``sum_sq`` hold sums of exp(L_i - shift) and its square;
    merging two accumulators rescales to the larger shift, so a fixed merge
    order gives the same result regardless of how work was scheduled.
    """

    shift: float = -np.inf
    sum: float = 0.0
    sum_sq: float = 0.0
    count: int = 0

    @classmethod
    def from_log_weights(cls, log_weights: np.ndarray) -> "LogMeanAccumulator":
        log_weights = np.asarray(log_weights, dtype=float)
        if log_weights.size == 0:
            return cls()
        shift = float(np.max(log_weights))
        if not np.isfinite(shift):
            raise NumericalError("log-weights are not finite", max_log_weight=shift)
        scaled = np.exp(log_weights - shift)
        return cls(shift=shift, sum=float(np.sum(scaled)),
                   sum_sq=float(np.sum(scaled * scaled)), count=int(log_weights.size))

    def merge(self, other: "LogMeanAccumulator") -> "LogMeanAccumulator":
        if other.count == 0:
            return LogMeanAccumulator(self.shift, self.sum, self.sum_sq, self.count)
        if self.count == 0:
            return LogMeanAccumulator(other.shift, other.sum, other.sum_sq, other.count)
        shift = max(self.shift, other.shift)
        a = np.exp(self.shift - shift)
        b = np.exp(other.shift - shift)
        return LogMeanAccumulator(
            shift=shift,
            sum=self.sum * a + other.sum * b,
            sum_sq=self.sum_sq * a * a + other.sum_sq * b * b,
            count=self.count + other.count,
        )

    @property
    def log_mean(self) -> float:
        if self.count == 0:
            return float("nan")
        return self.shift + float(np.log(self.sum / self.count))

    @property
    def relative_stderr(self) -> float:
        """Standard error of the mean divided by the mean."""
        if self.count < 2:
            return 0.0
        mean = self.sum / self.count
        var = max(self.sum_sq / self.count - mean * mean, 0.0) * self.count / (self.count - 1)
        return float(np.sqrt(var / self.count) / mean)

    def mean_and_stderr(self) -> Tuple[float, float]:
        mean = float(np.exp(self.log_mean))
        return mean, mean * self.relative_stderr


def hill_tail_index(log_weights: np.ndarray, tail_fraction: float = 0.01,
                    min_tail: int = 10) -> float:
    """Hill estimate of the Pareto tail index of exp(log_weights).

    Small values mean heavy tails; below 2 the weights have no finite variance.
    """
    values = np.sort(np.asarray(log_weights, dtype=float)[np.isfinite(log_weights)])[::-1]
    if values.size <= min_tail:
        return float("inf")
    k = max(min_tail, int(tail_fraction * values.size))
    k = min(k, values.size - 1)
    excess = float(np.mean(values[:k] - values[k]))
    if excess <= 0.0:
        return float("inf")
    return 1.0 / excess
