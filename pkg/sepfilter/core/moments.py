#!/usr/bin/env python3
"""
Conditional Moments
===================

Hat coefficients f_hat = E[f(t, X, Y) | observations] under the filter law,
and the separability classification of a model.

Features:
- Closed forms for linear, quadratic (scalar), quadratic expansion and
  exponential (scalar) families
- Weighted sums for Wonham probabilities and particle clouds
- Tensor Gauss-Hermite quadrature (n <= 3) with a Monte-Carlo fallback
- Per-coefficient verdicts: strict, wider or none
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from sepfilter.core.errors import SaturationError, UnsupportedDimensionError
from sepfilter.core.families import CoefficientMap
from sepfilter.core.filters import ParticleCloud, SimplexFilterState
from sepfilter.core.model import ModelSpec, d_sigma
from sepfilter.core.utils import gauss_hermite, psd_sqrt

# Configure logger
logger = logging.getLogger(__name__)

DEFAULT_ORDER = 20
MIN_ORDER = 5
MAX_TENSOR_DIM = 3
MC_SAMPLES = 20000
LOG_MAX = float(np.log(np.finfo(float).max))

VERDICT_RANK = {"strict": 0, "wider": 1, "none": 2}
REQUIRED_STATISTICS = {"strict": ["m"], "wider": ["m", "Pi"], "none": []}


def hat_linear(a0: np.ndarray, A: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.asarray(a0) + np.einsum("...ij,...j->...i", np.asarray(A), np.asarray(m))


def _scalar_moments(m: Any, P: Any) -> Tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=float)
    P = np.asarray(P, dtype=float)
    if m.ndim and m.shape[-1] != 1 and P.ndim >= 2:
        raise UnsupportedDimensionError("closed form is stated for a scalar hidden factor",
                                        n=int(m.shape[-1]))
    if P.ndim >= 2:
        if P.shape[-1] != 1:
            raise UnsupportedDimensionError("closed form is stated for a scalar hidden factor",
                                            n=int(P.shape[-1]))
        m, P = m[..., 0], P[..., 0, 0]
    return m, P


def hat_quadratic(a: float, b: float, c: float, m: Any, P: Any) -> np.ndarray:
    """a (m^2 + P) + b m + c for a scalar Gaussian N(m, P).

    Raises:
        UnsupportedDimensionError: For a hidden factor with n > 1.
    """
    m, P = _scalar_moments(m, P)
    return a * (m * m + P) + b * m + c


def hat_quadratic_expansion(a_at_m: np.ndarray, hess_at_m: np.ndarray,
                            P: np.ndarray) -> np.ndarray:
    """a(m) + 1/2 tr(a_xx(m) P), componentwise over the leading output axis."""
    return np.asarray(a_at_m) + 0.5 * np.einsum("...pij,...ji->...p", hess_at_m, P)


def hat_exponential(eta: Any, m: Any, P: Any) -> np.ndarray:
    """Gaussian moment generating function exp(eta m + 1/2 eta^2 P), scalar x.

    Raises:
        SaturationError: If the exponent exceeds the floating point range.
    """
    m, P = _scalar_moments(m, P)
    eta = np.asarray(eta, dtype=float)
    exponent = eta * m + 0.5 * eta * eta * P
    if np.any(exponent > LOG_MAX):
        raise SaturationError("exponential moment overflows",
                              max_exponent=float(np.max(exponent)), eta=eta,
                              max_mean=float(np.max(m)), max_variance=float(np.max(P)))
    return np.exp(exponent)


def hat_simplex(f_values: np.ndarray, p: np.ndarray) -> np.ndarray:
    """sum_i f(i) p_i; ``f_values`` is (K,) or (..., K, P)."""
    f = np.asarray(f_values, dtype=float)
    p = np.asarray(p, dtype=float)
    if f.ndim == 1:
        return p @ f
    return np.einsum("...k,...kp->...p", p, f)


def _tensor_nodes(n: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    z, w = gauss_hermite(order)
    nodes = np.array(list(itertools.product(z, repeat=n)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=-1)
    return nodes, weights


def hat_monte_carlo(func: Callable[[np.ndarray], np.ndarray], m: np.ndarray, P: np.ndarray,
                    n_samples: int = MC_SAMPLES,
                    rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo E[func(X)], X ~ N(m, P); returns (value, stderr)."""
    rng = np.random.default_rng(0) if rng is None else rng
    m = np.asarray(m, dtype=float)
    root = psd_sqrt(P, name="filter covariance")
    z = rng.standard_normal((n_samples, m.shape[-1]))
    x = m[..., None, :] + np.einsum("...ij,kj->...ki", root, z)
    values = func(x)
    return values.mean(axis=-2), values.std(axis=-2, ddof=1) / np.sqrt(n_samples)


def hat_quadrature(func: Callable[[np.ndarray], np.ndarray], m: np.ndarray, P: np.ndarray,
                   order: int = DEFAULT_ORDER) -> np.ndarray:
    """E[func(X)] for X ~ N(m, P) by tensor Gauss-Hermite quadrature.

    ``func`` maps points (..., Q, n) to values (..., Q, P). Beyond three
    dimensions the Monte-Carlo fallback is used and its stderr logged.

    Raises:
        NumericalError: If P is not positive semi-definite.
    """
    m = np.asarray(m, dtype=float)
    n = m.shape[-1]
    if order < MIN_ORDER:
        logger.warning(f"Quadrature - order {order} is below {MIN_ORDER}, accuracy not guaranteed")
    if n > MAX_TENSOR_DIM:
        value, stderr = hat_monte_carlo(func, m, P)
        logger.warning(f"Quadrature - n = {n} uses Monte Carlo, max stderr {float(np.max(stderr)):.3g}")
        return value
    root = psd_sqrt(P, name="filter covariance")
    nodes, weights = _tensor_nodes(n, order)
    x = m[..., None, :] + np.einsum("...ij,kj->...ki", root, nodes)
    return np.einsum("k,...kp->...p", weights, func(x))


def hat_family(family: CoefficientMap, t: float, state: Any, y: np.ndarray,
               order: int = DEFAULT_ORDER, states: Optional[np.ndarray] = None) -> np.ndarray:
    """Hat of one coefficient family (flattened output) under a filter state.

    Gaussian states use the closed form of the family when one exists and
    quadrature otherwise; simplex states need the chain ``states``.
    """
    y = np.asarray(y, dtype=float)
    if isinstance(state, SimplexFilterState):
        values = family.evaluate_flat(t, np.asarray(states, dtype=float), y[..., None, :])
        return hat_simplex(values, state.p)
    if isinstance(state, ParticleCloud):
        values = family.evaluate_flat(t, state.particles, y[..., None, :])
        return np.einsum("...k,...kp->...p", state.weights, values)

    m, P = state.mean, state.cov
    n = m.shape[-1]
    tag = family.family
    if tag == "linear":
        f0, F = family.affine_parts(t, y)
        return hat_linear(f0, F, m)
    if tag == "constant" or not family.depends_on_x:
        return family.evaluate_flat(t, m, y)
    if tag == "quadratic":
        if n == 1:
            Pb = np.broadcast_to(P, m.shape[:-1] + (1, 1))
            return hat_quadratic(family.quad[:, 0, 0], family.lin[:, 0], family.const,
                                 m[..., None, :], Pb[..., None, :, :])
        return hat_quadratic_expansion(family.evaluate_flat(t, m, y),
                                       family.hessian_flat(t, m, y), P[..., None, :, :])
    if tag == "exponential" and n == 1:
        Pb = np.broadcast_to(P, m.shape[:-1] + (1, 1))
        mgf = hat_exponential(family.eta[:, 0], m[..., None, :], Pb[..., None, :, :])
        return family.offset + family.scale * mgf
    return hat_quadrature(lambda x: family.evaluate_flat(t, x, y[..., None, :]), m, P, order)


def hat_coefficients(spec: ModelSpec, t: float, state: Any, y: np.ndarray,
                     order: int = DEFAULT_ORDER) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Filter expectations of a^(1), c and the stacked observation drift.

    Returns:
        tuple: ``a1_hat`` (..., m1), ``c_hat`` (...,) and ``aY_hat`` (..., mY).
    """
    y = np.asarray(y, dtype=float)
    states = spec.x0_law.states if spec.is_chain else None
    hats = {key: hat_family(fam, t, state, y, order, states)
            for key, fam in (("bf", spec.bf), ("a", spec.a), ("c", spec.c), ("aE", spec.aE))}
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    a_hat = hats["a"]
    c_hat = hats["c"]
    batch = np.broadcast_shapes(a_hat.shape[:-1], y.shape[:-1])
    parts = [hats["bf"], a_hat - 0.5 * d_sigma(spec, t, y),
             c_hat - 0.5 * np.sum(xi * xi, axis=-1, keepdims=True), hats["aE"]]
    aY_hat = np.concatenate([np.broadcast_to(p, batch + p.shape[-1:]) for p in parts], axis=-1)
    return a_hat[..., : spec.dims.m1], c_hat[..., 0], aY_hat


@dataclass
class CoefficientClass:
    coefficient: str
    family: str
    case: str
    verdict: str

    def to_dict(self) -> Dict[str, str]:
        return {"coefficient": self.coefficient, "family": self.family,
                "case": self.case, "verdict": self.verdict}


@dataclass
class SeparabilityReport:
    """Per-coefficient classes; the overall verdict is the weakest of them."""

    model: str
    classes: List[CoefficientClass] = field(default_factory=list)
    required_override: Optional[List[str]] = None

    @property
    def verdict(self) -> str:
        if not self.classes:
            return "strict"
        return max((c.verdict for c in self.classes), key=VERDICT_RANK.__getitem__)

    @property
    def required_statistics(self) -> List[str]:
        if self.required_override is not None:
            return list(self.required_override)
        return list(REQUIRED_STATISTICS[self.verdict])

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model, "verdict": self.verdict,
                "required_statistics": self.required_statistics,
                "coefficients": [c.to_dict() for c in self.classes]}


def _case_of(family: CoefficientMap, n: int) -> Tuple[str, str]:
    tag = family.family
    if tag in ("constant", "linear") or not family.depends_on_x:
        return "linear", "strict"
    if tag == "quadratic":
        return ("quadratic", "wider") if n == 1 else ("quadratic-expansion", "wider")
    if tag == "exponential":
        return "exponential", "wider"
    return "general", "none"


def classify(spec: ModelSpec) -> SeparabilityReport:
    """Map a, c (and a^E, b^f when present) to separability cases."""
    dims = spec.dims
    targets = [("a", spec.a), ("c", spec.c)]
    if dims.k > 0:
        targets.append(("aE", spec.aE))
    if dims.ell > 0:
        targets.append(("bf", spec.bf))
    report = SeparabilityReport(model=spec.name,
                                required_override=["p"] if spec.is_chain else None)
    for key, fam in targets:
        case, verdict = _case_of(fam, dims.n)
        report.classes.append(CoefficientClass(key, fam.family, case, verdict))
    logger.info(f"Classify - {spec.name}: {report.verdict}")
    return report
