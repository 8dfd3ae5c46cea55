#!/usr/bin/env python3
"""
Partially Observed Market Model
===============================

Defines the factor / asset / benchmark / expert model, validates it on a
check lattice and assembles the stacked observation coefficients.

Observation vector Y = (F, ln S, ln L, E) with
    a^Y     = (b^f, a - 1/2 d_Sigma, c - 1/2 Xi Xi', a^E)
    Sigma^Y = (Lambda^f; Sigma; Xi; Sigma^E)

Noise columns are ordered [F | X | S | L | E], so d = ell + n + m + k + 1.

Features:
- Immutable ModelSpec built from scenario or preset blocks
- Deterministic 27-point lattice validation (violations are data)
- Observation Gram geometry with inactive rows dropped
- Hidden Markov chain variant (categorical x0 law plus generator)
"""

import functools
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sepfilter.core.errors import ShapeError, UnsupportedModelError, ValidationError
from sepfilter.core.families import CoefficientMap, build_family
from sepfilter.core.utils import PD_RTOL, gram_inverse, is_positive_definite

# Configure logger
logger = logging.getLogger(__name__)

COEFFICIENT_KEYS = ("b", "lambda", "bf", "lambdaf", "a", "sigma", "c", "xi", "aE", "sigmaE")
OBSERVED_DIFFUSIONS = ("lambdaf", "sigma", "xi", "sigmaE")
ZERO_ROW_TOL = 0.0


@dataclass(frozen=True)
class Dimensions:
    """Model dimensions; d and mY follow from the five counts."""

    ell: int
    n: int
    m: int
    m1: int
    k: int

    def __post_init__(self) -> None:
        if self.ell < 0 or self.k < 0:
            raise ValidationError("ell and k must be non-negative", ell=self.ell, k=self.k)
        if self.n < 1:
            raise ValidationError("at least one hidden factor is required", n=self.n)
        if not 1 <= self.m1 <= self.m:
            raise ValidationError("tradable assets must satisfy 1 <= m1 <= m", m=self.m, m1=self.m1)

    @property
    def m2(self) -> int:
        return self.m - self.m1

    @property
    def d(self) -> int:
        return self.ell + self.n + self.m + self.k + 1

    @property
    def mY(self) -> int:
        return self.ell + self.m + self.k + 1

    @property
    def benchmark_row(self) -> int:
        return self.ell + self.m

    def to_dict(self) -> Dict[str, int]:
        return {"ell": self.ell, "n": self.n, "m": self.m, "m1": self.m1, "m2": self.m2,
                "k": self.k, "d": self.d, "mY": self.mY}


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    kind = "gaussian"


@dataclass(frozen=True, eq=False)
class CategoricalLaw:
    states: np.ndarray
    probs: np.ndarray

    kind = "categorical"


InitialLaw = Union[GaussianLaw, CategoricalLaw]


@dataclass(frozen=True, eq=False)
class LatticeBounds:
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full coefficient set of the partially observed model."""

    dims: Dimensions
    b: CoefficientMap
    Lambda: CoefficientMap
    bf: CoefficientMap
    Lambdaf: CoefficientMap
    a: CoefficientMap
    Sigma: CoefficientMap
    c: CoefficientMap
    Xi: CoefficientMap
    aE: CoefficientMap
    SigmaE: CoefficientMap
    x0_law: InitialLaw
    y0: np.ndarray
    horizon: float = 1.0
    generator: Optional[np.ndarray] = None
    bounds: Optional[LatticeBounds] = None
    name: str = "custom"
    description: str = ""
    classical: bool = False

    @property
    def is_chain(self) -> bool:
        return isinstance(self.x0_law, CategoricalLaw)

    @property
    def chain_generator(self) -> np.ndarray:
        if not self.is_chain:
            raise ValidationError("model has no hidden Markov chain")
        K = self.x0_law.states.shape[0]
        return np.zeros((K, K)) if self.generator is None else self.generator

    def coefficients(self) -> Dict[str, CoefficientMap]:
        return {"b": self.b, "lambda": self.Lambda, "bf": self.bf, "lambdaf": self.Lambdaf,
                "a": self.a, "sigma": self.Sigma, "c": self.c, "xi": self.Xi,
                "aE": self.aE, "sigmaE": self.SigmaE}

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        dm = self.dims
        return {"b": (dm.n,), "lambda": (dm.n, dm.d), "bf": (dm.ell,), "lambdaf": (dm.ell, dm.d),
                "a": (dm.m,), "sigma": (dm.m, dm.d), "c": (1,), "xi": (1, dm.d),
                "aE": (dm.k,), "sigmaE": (dm.k, dm.d)}

    @property
    def x_reference(self) -> np.ndarray:
        if self.is_chain:
            return np.asarray(self.x0_law.states, dtype=float).mean(axis=0)
        return np.asarray(self.x0_law.mean, dtype=float)

    @property
    def diffusion_depends_on_y(self) -> bool:
        return any(self.coefficients()[key].depends_on_y for key in OBSERVED_DIFFUSIONS)

    @functools.cached_property
    def lattice_bounds(self) -> LatticeBounds:
        if self.bounds is not None:
            return self.bounds
        if self.is_chain:
            states = np.asarray(self.x0_law.states, dtype=float)
            x_lo, x_hi = states.min(axis=0), states.max(axis=0)
        else:
            sd = np.sqrt(np.maximum(np.diag(np.atleast_2d(self.x0_law.cov)), 0.0))
            sd = np.maximum(sd, 0.1)
            x_lo, x_hi = self.x0_law.mean - 3.0 * sd, self.x0_law.mean + 3.0 * sd
        return LatticeBounds(x_lo=x_lo, x_hi=x_hi, y_lo=self.y0 - 1.0, y_hi=self.y0 + 1.0)

    def check_lattice(self) -> List[Tuple[float, np.ndarray, np.ndarray]]:
        """27 deterministic (t, x, y) points: {0, T/2, T} x {lo, mid, hi}^2."""
        pb = self.lattice_bounds
        times = (0.0, 0.5 * self.horizon, self.horizon)
        xs = (pb.x_lo, 0.5 * (pb.x_lo + pb.x_hi), pb.x_hi)
        ys = (pb.y_lo, 0.5 * (pb.y_lo + pb.y_hi), pb.y_hi)
        return [(t, np.asarray(x, float), np.asarray(y, float))
                for t, x, y in itertools.product(times, xs, ys)]

    @functools.cached_property
    def active_rows(self) -> np.ndarray:
        """Observation rows of Sigma^Y that are non-zero somewhere on the check lattice."""
        active = np.zeros(self.dims.mY, dtype=bool)
        for t, _, y in self.check_lattice():
            rows = observation_diffusion(self, t, y)
            active |= np.any(np.abs(rows) > ZERO_ROW_TOL, axis=-1)
        if not np.all(active):
            logger.info(f"Model {self.name} - inactive observation rows: {np.flatnonzero(~active).tolist()}")
        return active


@dataclass
class Violation:
    invariant: str
    subject: str
    point: Optional[Dict[str, Any]]
    detail: str = ""
    count: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"invariant": self.invariant, "subject": self.subject, "point": self.point,
                "detail": self.detail, "count": self.count}


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)
    n_points: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, invariant: str, subject: str, point: Optional[Dict[str, Any]],
            detail: str = "") -> None:
        for existing in self.violations:
            if existing.invariant == invariant and existing.subject == subject:
                existing.count += 1
                return
        self.violations.append(Violation(invariant, subject, point, detail))

    def to_dict(self) -> Dict[str, Any]:
        return {"ok": self.ok, "n_points": self.n_points,
                "violations": [v.to_dict() for v in self.violations]}

    def raise_if_failed(self, spec_name: str) -> None:
        if not self.ok:
            raise ValidationError(f"Model {spec_name} failed validation", report=self.to_dict())


def _point_dict(t: float, x: np.ndarray, y: np.ndarray) -> Dict[str, Any]:
    return {"t": float(t), "x": [float(v) for v in x], "y": [float(v) for v in y]}


def _stack_rows(parts: Sequence[np.ndarray], batch: Tuple[int, ...]) -> np.ndarray:
    return np.concatenate([np.broadcast_to(p, batch + p.shape[len(p.shape) - 1:]) for p in parts],
                          axis=-1)


def d_sigma(spec: ModelSpec, t: float, y: np.ndarray) -> np.ndarray:
    """Diagonal of Sigma Sigma' as an m-vector (batched over y)."""
    y = np.asarray(y, dtype=float)
    Sigma = spec.Sigma.evaluate(t, spec.x_reference, y)
    if Sigma.shape[-2:] != (spec.dims.m, spec.dims.d):
        raise ShapeError("Sigma output does not match (m, d)",
                         expected=[spec.dims.m, spec.dims.d], got=list(Sigma.shape[-2:]))
    return np.sum(Sigma * Sigma, axis=-1)


def observation_diffusion(spec: ModelSpec, t: float, y: np.ndarray) -> np.ndarray:
    """Sigma^Y(t, y) with all mY rows, shape (..., mY, d)."""
    y = np.asarray(y, dtype=float)
    x = spec.x_reference
    blocks = [spec.Lambdaf.evaluate(t, x, y), spec.Sigma.evaluate(t, x, y),
              spec.Xi.evaluate(t, x, y), spec.SigmaE.evaluate(t, x, y)]
    batch = y.shape[:-1]
    d = spec.dims.d
    for name, blk in zip(OBSERVED_DIFFUSIONS, blocks):
        if blk.shape[-1] != d:
            raise ShapeError(f"{name} output has {blk.shape[-1]} columns, expected d = {d}",
                             coefficient=name)
    return np.concatenate([np.broadcast_to(b, batch + b.shape[-2:]) for b in blocks], axis=-2)


def observation_drift(spec: ModelSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """a^Y(t, x, y), shape (..., mY)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    parts = [
        spec.bf.evaluate_flat(t, x, y),
        spec.a.evaluate_flat(t, x, y) - 0.5 * d_sigma(spec, t, y),
        spec.c.evaluate_flat(t, x, y) - 0.5 * np.sum(xi * xi, axis=-1, keepdims=True),
        spec.aE.evaluate_flat(t, x, y),
    ]
    return _stack_rows(parts, batch)


def observation_jacobian(spec: ModelSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d a^Y / dx, shape (..., mY, n); the -1/2 corrections do not depend on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    parts = [f.jacobian_flat(t, x, y) for f in (spec.bf, spec.a, spec.c, spec.aE)]
    n = spec.dims.n
    return np.concatenate([np.broadcast_to(p, batch + (p.shape[-2], n)) for p in parts], axis=-2)


def assemble_observation(spec: ModelSpec, t: float, x: np.ndarray,
                         y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked observation drift a^Y (..., mY) and diffusion Sigma^Y (..., mY, d)."""
    aY = observation_drift(spec, t, x, y)
    SigmaY = observation_diffusion(spec, t, y)
    if aY.shape[-1] != spec.dims.mY or SigmaY.shape[-2:] != (spec.dims.mY, spec.dims.d):
        raise ShapeError("observation coefficients do not match (mY, d)",
                         expected=[spec.dims.mY, spec.dims.d],
                         got=[aY.shape[-1]] + list(SigmaY.shape[-2:]))
    return aY, SigmaY


@dataclass(frozen=True, eq=False)
class ObservationGeometry:
    """Active-row Sigma^Y together with its Gram inverse and inverse root."""

    active: np.ndarray
    sigma_y: np.ndarray
    gram: np.ndarray
    gram_inv: np.ndarray
    gram_inv_sqrt: np.ndarray

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v[..., self.active]

    def expand(self, v: np.ndarray) -> np.ndarray:
        """Scatter active-row values back to mY rows with zeros elsewhere."""
        out = np.zeros(v.shape[:-1] + (self.active.size,))
        out[..., self.active] = v
        return out

    def min_norm_noise(self, residual: np.ndarray) -> np.ndarray:
        """Sigma^Y' G^{-1} r: minimum-norm dW with Sigma^Y dW = r (active rows)."""
        w = np.einsum("...ij,...j->...i", self.gram_inv, residual)
        return np.einsum("...id,...i->...d", self.sigma_y, w)

    def quadratic(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """u' G^{-1} v over active rows."""
        return np.einsum("...i,...ij,...j->...", u, self.gram_inv, v)


def observation_geometry(spec: ModelSpec, t: float,
                         y: Optional[np.ndarray] = None) -> ObservationGeometry:
    """Gram geometry at (t, y); evaluated once (unbatched) when Sigma^Y ignores y."""
    if y is None or not spec.diffusion_depends_on_y:
        y = spec.y0
    sigma_y = observation_diffusion(spec, t, y)[..., spec.active_rows, :]
    gram = sigma_y @ np.swapaxes(sigma_y, -1, -2)
    inv, inv_sqrt = gram_inverse(gram)
    return ObservationGeometry(active=spec.active_rows, sigma_y=sigma_y, gram=gram,
                               gram_inv=inv, gram_inv_sqrt=inv_sqrt)


def sigma1(spec: ModelSpec, t: float, y: np.ndarray) -> np.ndarray:
    """Tradable block Sigma^(1): first m1 rows of Sigma."""
    return spec.Sigma.evaluate(t, spec.x_reference, y)[..., : spec.dims.m1, :]


def affine_parts(fam: CoefficientMap, t: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Intercept (..., P) and slope (P, n) of a constant or linear family."""
    if not hasattr(fam, "affine_parts"):
        raise UnsupportedModelError(
            f"coefficient {fam.name} is {fam.family}, an affine family is required",
            coefficient=fam.name, family=fam.family)
    return fam.affine_parts(t, y)


def observation_affine_parts(spec: ModelSpec, t: float,
                             y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """a^Y = a0(t, y) + A^Y x for linear models: (a0 (..., mY), A^Y (mY, n))."""
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-1]
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    parts = [affine_parts(f, t, y) for f in (spec.bf, spec.a, spec.c, spec.aE)]
    corrections = [0.0, -0.5 * d_sigma(spec, t, y),
                   -0.5 * np.sum(xi * xi, axis=-1, keepdims=True), 0.0]
    a0 = np.concatenate([np.broadcast_to(p[0] + corr, batch + (p[0].shape[-1],))
                         for p, corr in zip(parts, corrections)], axis=-1)
    A = np.concatenate([p[1] for p in parts], axis=0)
    return a0, A


def generator_problems(Q: np.ndarray, K: int) -> Optional[str]:
    if Q.shape != (K, K):
        return f"generator shape {Q.shape} does not match {K} states"
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        return "negative off-diagonal intensity"
    if np.any(np.abs(Q.sum(axis=1)) > 1e-10 * max(1.0, float(np.abs(Q).max()))):
        return "rows do not sum to zero"
    return None


def validate(spec: ModelSpec) -> ValidationReport:
    """Check the ModelSpec invariants on the deterministic check lattice.

    Args:
        spec: Model to check.

    Returns:
        ValidationReport: ``ok`` when every invariant holds; otherwise one
        violation per (invariant, subject) naming the first failing point and
        the number of failing points.
    """
    report = ValidationReport()
    dims = spec.dims
    shapes = spec.expected_shapes()
    coefficients = spec.coefficients()
    for key, fam in coefficients.items():
        if fam.shape != shapes[key]:
            report.add("coefficient shape", key, None,
                       f"declared {fam.shape}, expected {shapes[key]}")
        if fam.n != dims.n:
            report.add("coefficient shape", key, None, f"family built for n = {fam.n}")
    if np.asarray(spec.y0).shape != (dims.mY,):
        report.add("initial observation", "y0", None, f"expected {dims.mY} entries")
    if spec.horizon <= 0:
        report.add("time horizon", "horizon", None, "horizon must be positive")

    law = spec.x0_law
    if isinstance(law, GaussianLaw):
        if law.mean.shape != (dims.n,) or law.cov.shape != (dims.n, dims.n):
            report.add("initial law", "x0", None, "mean/cov shapes do not match n")
        elif np.min(np.linalg.eigvalsh(0.5 * (law.cov + law.cov.T))) < -PD_RTOL * max(np.trace(law.cov), 1.0):
            report.add("initial law", "x0", None, "P0 not positive semi-definite")
    else:
        if law.states.ndim != 2 or law.states.shape[1] != dims.n:
            report.add("initial law", "x0", None, "states must be a K x n array")
        if np.any(law.probs < 0) or abs(float(law.probs.sum()) - 1.0) > 1e-12:
            report.add("initial law", "x0", None, "probabilities must lie in the simplex")
        problem = generator_problems(spec.chain_generator, law.states.shape[0])
        if problem:
            report.add("generator invalid", "generator", None, problem)
    if not report.ok:
        logger.warning(f"Model {spec.name} - structural validation failed, lattice skipped")
        return report

    points = spec.check_lattice()
    report.n_points = len(points)
    x_hi = spec.lattice_bounds.x_hi
    for t, x, y in points:
        point = _point_dict(t, x, y)
        for key, fam in coefficients.items():
            value = fam.evaluate(t, x, y)
            if value.shape != shapes[key]:
                report.add("coefficient shape", key, point, f"evaluated to {value.shape}")
            elif not np.all(np.isfinite(value)):
                report.add("finite coefficients", key, point, "non-finite value")
        if dims.m > 0:
            Sigma = spec.Sigma.evaluate(t, x, y)
            if not is_positive_definite(Sigma @ Sigma.T):
                report.add("ΣΣ' singular", "sigma", point, "Sigma Sigma' is not positive definite")
        rows = observation_diffusion(spec, t, y)[spec.active_rows]
        if rows.size and not is_positive_definite(rows @ rows.T):
            report.add("Σ^YΣ^Y' singular", "sigmaY", point,
                       "Gram matrix of the active observation rows is not positive definite")
        for key in OBSERVED_DIFFUSIONS:
            fam = coefficients[key]
            lo, hi = fam.evaluate(t, x, y), fam.evaluate(t, x_hi, y)
            scale = max(float(np.max(np.abs(lo), initial=0.0)), 1.0)
            if not np.allclose(lo, hi, rtol=0.0, atol=1e-12 * scale):
                report.add("observed diffusion depends on x", key, point,
                           f"{key} changes between x = {x.tolist()} and x = {x_hi.tolist()}")
        inactive = ~spec.active_rows
        if np.any(inactive):
            drift_lo = observation_drift(spec, t, x, y)[inactive]
            drift_hi = observation_drift(spec, t, x_hi, y)[inactive]
            if not np.allclose(drift_lo, drift_hi, rtol=0.0, atol=1e-12):
                report.add("inactive observation row drift depends on x", "aY", point,
                           "a noiseless observation row reveals the hidden state")
    if report.ok:
        logger.debug(f"Model {spec.name} - validation passed on {len(points)} points")
    else:
        logger.warning(f"Model {spec.name} - {len(report.violations)} invariant violations")
    return report


def _law_from_dict(block: Dict[str, Any], n: int) -> InitialLaw:
    if "states" in block:
        states = np.asarray(block["states"], dtype=float).reshape(-1, n)
        probs = np.asarray(block.get("probs", np.full(states.shape[0], 1.0 / states.shape[0])),
                           dtype=float)
        return CategoricalLaw(states=states, probs=probs)
    mean = np.asarray(block.get("mean", np.zeros(n)), dtype=float).reshape(-1)
    cov = np.asarray(block.get("cov", np.zeros((n, n))), dtype=float)
    return GaussianLaw(mean=mean, cov=cov.reshape(mean.size, mean.size))


def model_from_dict(cfg: Dict[str, Any], name: Optional[str] = None) -> ModelSpec:
    """Build a ModelSpec from a parsed scenario/preset model block.

    Required keys: ``dims{ell,n,m,m1,k}``, ``horizon``, ``x0``, ``y0``;
    coefficient blocks ``b, lambda, bf, lambdaf, a, sigma, c, xi, aE, sigmaE``
    each ``{family, params}`` (missing blocks are zero). Optional:
    ``generator`` (hidden chain), ``bounds{x_lo,x_hi,y_lo,y_hi}``.
    """
    if "dims" not in cfg:
        raise ValidationError("model block needs 'dims'")
    dd = cfg["dims"]
    try:
        dims = Dimensions(ell=int(dd.get("ell", 0)), n=int(dd["n"]), m=int(dd["m"]),
                          m1=int(dd.get("m1", dd["m"])), k=int(dd.get("k", 0)))
    except KeyError as e:
        raise ValidationError(f"dims block is missing {e}")
    n, mY, d = dims.n, dims.mY, dims.d
    shapes = {"b": (n,), "lambda": (n, d), "bf": (dims.ell,), "lambdaf": (dims.ell, d),
              "a": (dims.m,), "sigma": (dims.m, d), "c": (1,), "xi": (1, d),
              "aE": (dims.k,), "sigmaE": (dims.k, d)}
    families = {key: build_family(key, cfg.get(key), shapes[key], n, mY) for key in COEFFICIENT_KEYS}
    law = _law_from_dict(cfg.get("x0", {}), n)
    y0 = np.asarray(cfg.get("y0", np.zeros(mY)), dtype=float).reshape(-1)
    generator = cfg.get("generator")
    bounds = None
    if "bounds" in cfg:
        bb = cfg["bounds"]
        bounds = LatticeBounds(x_lo=np.asarray(bb["x_lo"], float), x_hi=np.asarray(bb["x_hi"], float),
                               y_lo=np.asarray(bb["y_lo"], float), y_hi=np.asarray(bb["y_hi"], float))
    return ModelSpec(
        dims=dims, b=families["b"], Lambda=families["lambda"], bf=families["bf"],
        Lambdaf=families["lambdaf"], a=families["a"], Sigma=families["sigma"],
        c=families["c"], Xi=families["xi"], aE=families["aE"], SigmaE=families["sigmaE"],
        x0_law=law, y0=y0, horizon=float(cfg.get("horizon", 1.0)),
        generator=None if generator is None else np.asarray(generator, dtype=float),
        bounds=bounds, name=name or str(cfg.get("name", "custom")),
        description=str(cfg.get("description", "")), classical=bool(cfg.get("classical", False)),
    )
