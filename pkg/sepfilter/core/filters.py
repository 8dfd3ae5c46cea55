#!/usr/bin/env python3
"""
Filter Bank
===========

Finite-dimensional filters for the hidden factor given the observation path.

Features:
- Kalman-Bucy filter for linear-Gaussian models
- Extended Kalman filter with analytic per-family linearization
- Wonham filter for a hidden Markov chain
- Bootstrap particle filter (oracle) with systematic resampling
- Innovations increments and the dzeta = G dt + H dY form of each filter
- Batched trajectories over many observation paths, CSV export
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.integrate import solve_ivp

from sepfilter.core.errors import (
    DegenerateLikelihoodError,
    NumericalError,
    UnsupportedModelError,
    ValidationError,
)
from sepfilter.core.model import (
    ModelSpec,
    ObservationGeometry,
    affine_parts,
    generator_problems,
    observation_affine_parts,
    observation_diffusion,
    observation_drift,
    observation_geometry,
    observation_jacobian,
)
from sepfilter.core.utils import (
    PD_RTOL,
    gram_inverse,
    particle_stream,
    psd_floor,
    psd_sqrt,
    symmetrize,
    unvech,
    vech,
)

# Configure logger
logger = logging.getLogger(__name__)

FILTER_KINDS = ("KF", "EKF", "Wonham", "particle")
_KIND_ALIASES = {
    "kf": "KF", "kalman": "KF", "kalman-bucy": "KF",
    "ekf": "EKF",
    "wonham": "Wonham",
    "particle": "particle", "pf": "particle",
}
MIN_PARTICLES = 100
DEFAULT_PARTICLES = 1000


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", M, v)


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def normalize_kind(kind: str) -> str:
    key = str(kind).strip().lower()
    if key not in _KIND_ALIASES:
        raise ValidationError(f"unsupported filter kind '{kind}'", allowed=list(FILTER_KINDS))
    return _KIND_ALIASES[key]


def is_linear_model(spec: ModelSpec) -> bool:
    drifts = (spec.b, spec.bf, spec.a, spec.c, spec.aE)
    return all(hasattr(fam, "affine_parts") for fam in drifts)


def default_filter_kind(spec: ModelSpec) -> str:
    if spec.is_chain:
        return "Wonham"
    return "KF" if is_linear_model(spec) else "EKF"


@dataclass(eq=False)
class GaussianFilterState:
    """Conditional mean (..., n) and covariance (n, n) or (..., n, n)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def n(self) -> int:
        return int(self.mean.shape[-1])

    def check(self) -> None:
        if not np.allclose(self.cov, _t(self.cov), rtol=0.0, atol=1e-12):
            raise NumericalError("filter covariance is not symmetric")
        vals = np.linalg.eigvalsh(self.cov)
        trace = np.trace(self.cov, axis1=-2, axis2=-1)
        if np.any(vals[..., 0] < -PD_RTOL * np.maximum(trace, 1.0)):
            raise NumericalError("filter covariance is not positive semi-definite",
                                 min_eigenvalue=float(np.min(vals)))


@dataclass(eq=False)
class SimplexFilterState:
    """Conditional state probabilities (..., K)."""

    p: np.ndarray

    def check(self) -> None:
        if np.any(self.p < 0) or np.any(np.abs(self.p.sum(axis=-1) - 1.0) > 1e-12):
            raise NumericalError("filter probabilities left the simplex")


@dataclass(eq=False)
class ParticleCloud:
    """Weighted particles (..., N, n) with one random stream per observation path."""

    particles: np.ndarray
    log_weights: np.ndarray
    rngs: List[np.random.Generator]
    payload: Optional[np.ndarray] = None
    state_index: Optional[np.ndarray] = None

    @property
    def n_particles(self) -> int:
        return int(self.log_weights.shape[-1])

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - np.max(self.log_weights, axis=-1, keepdims=True))
        return w / np.sum(w, axis=-1, keepdims=True)

    @property
    def ess(self) -> np.ndarray:
        w = self.weights
        return 1.0 / np.sum(w * w, axis=-1)

    @property
    def mean(self) -> np.ndarray:
        return np.einsum("...k,...ki->...i", self.weights, self.particles)

    @property
    def cov(self) -> np.ndarray:
        centred = self.particles - self.mean[..., None, :]
        return np.einsum("...k,...ki,...kj->...ij", self.weights, centred, centred)


FilterState = Union[GaussianFilterState, SimplexFilterState, ParticleCloud]


@dataclass(eq=False)
class Linearization:
    bbar: np.ndarray
    B: np.ndarray
    abar: np.ndarray
    AY: np.ndarray


@dataclass(eq=False)
class FilterDriftDiffusion:
    """Coefficients of dzeta = G dt + H dY, with G_hat = G + H a^Y_hat."""

    G: np.ndarray
    H: np.ndarray
    G_hat: np.ndarray

    @property
    def q(self) -> int:
        return int(self.G.shape[-1])


def _lambda(spec: ModelSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    fam = spec.Lambda
    if not fam.depends_on_x and not fam.depends_on_y:
        return fam.evaluate(t, spec.x_reference, spec.y0)
    return fam.evaluate(t, x, y)


def _observation_shift(spec: ModelSpec, t: float, y: np.ndarray, shift: np.ndarray) -> np.ndarray:
    SY = observation_diffusion(spec, t, y if spec.diffusion_depends_on_y else spec.y0)
    return np.einsum("...id,...d->...i", SY, shift)


def ekf_linearize(spec: ModelSpec, t: float, state: GaussianFilterState,
                  y: np.ndarray) -> Linearization:
    """First-order expansion of b and a^Y around the filter mean.

    Returns:
        Linearization: ``bbar = b(m) - B m`` with ``B = db/dx(m)`` and the same
        for the observation drift; derivatives come from the families.
    """
    m = state.mean
    y = np.asarray(y, dtype=float)
    B = spec.b.jacobian_flat(t, m, y)
    bbar = spec.b.evaluate_flat(t, m, y) - _mv(B, m)
    AY = observation_jacobian(spec, t, m, y)
    abar = observation_drift(spec, t, m, y) - _mv(AY, m)
    return Linearization(bbar=bbar, B=B, abar=abar, AY=AY)


def kf_linearization(spec: ModelSpec, t: float, y: np.ndarray) -> Linearization:
    """Exact affine decomposition; slopes stay unbatched so the covariance does too."""
    b0, B = affine_parts(spec.b, t, np.asarray(y, dtype=float))
    a0, AY = observation_affine_parts(spec, t, y)
    return Linearization(bbar=b0, B=B, abar=a0, AY=AY)


def _gain_terms(geo: ObservationGeometry, lin: Linearization, cov: np.ndarray,
                Lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    A_a = lin.AY[..., geo.active, :]
    cross = cov @ _t(A_a) + Lam @ _t(geo.sigma_y)
    return A_a, cross, cross @ geo.gram_inv


def _riccati_rhs(lin: Linearization, cov: np.ndarray, Lam: np.ndarray,
                 cross: np.ndarray, gram_inv: np.ndarray) -> np.ndarray:
    return (Lam @ _t(Lam) + lin.B @ cov + cov @ _t(lin.B)
            - cross @ gram_inv @ _t(cross))


def _gaussian_update(spec: ModelSpec, t: float, state: GaussianFilterState, y: np.ndarray,
                     dy: np.ndarray, dt: float, lin: Linearization,
                     shift: Optional[np.ndarray]) -> GaussianFilterState:
    geo = observation_geometry(spec, t, y)
    m, cov = state.mean, state.cov
    Lam = _lambda(spec, t, m, y)
    bbar, abar = lin.bbar, lin.abar
    if shift is not None:
        bbar = bbar - np.einsum("...id,...d->...i", Lam, shift)
        abar = abar - _observation_shift(spec, t, y, shift)
    A_a, cross, K = _gain_terms(geo, lin, cov, Lam)
    innovation = geo.restrict(dy) - (geo.restrict(abar) + _mv(A_a, m)) * dt
    mean = m + (bbar + _mv(lin.B, m)) * dt + _mv(K, innovation)
    cov = psd_floor(cov + _riccati_rhs(lin, cov, Lam, cross, geo.gram_inv) * dt)
    return GaussianFilterState(mean=mean, cov=cov)


def ekf_step(spec: ModelSpec, t: float, state: GaussianFilterState, y: np.ndarray,
             dy: np.ndarray, dt: float, shift: Optional[np.ndarray] = None) -> GaussianFilterState:
    """One Euler step of the extended Kalman filter.

    Args:
        spec: Model.
        t: Left end of the step.
        state: Filter state at t.
        y: Observation at t.
        dy: Realized observation increment over the step.
        dt: Step length.
        shift: Optional control drift shift (filter for the Ph dynamics).

    Returns:
        GaussianFilterState: Updated state; covariance symmetrized and
        eigenvalue-floored at zero.

    Raises:
        SingularGramError: If Sigma^Y Sigma^Y' is singular.
    """
    return _gaussian_update(spec, t, state, y, dy, dt, ekf_linearize(spec, t, state, y), shift)


def kalman_bucy_step(spec: ModelSpec, t: float, state: GaussianFilterState, y: np.ndarray,
                     dy: np.ndarray, dt: float,
                     shift: Optional[np.ndarray] = None) -> GaussianFilterState:
    """Kalman-Bucy step: the EKF update on exactly affine coefficients."""
    return _gaussian_update(spec, t, state, y, dy, dt, kf_linearization(spec, t, y), shift)


def wonham_step(Q: np.ndarray, f_values: np.ndarray, sigma: Any, p: SimplexFilterState,
                dy: np.ndarray, dt: float, gram: Optional[np.ndarray] = None) -> SimplexFilterState:
    """Euler step of the Wonham filter followed by clip-and-renormalize.

    ``f_values`` holds the observation drift per state, either a K-vector with
    scalar ``sigma`` or a (..., K, r) array with ``sigma`` the (r, d) diffusion
    (or ``gram`` its Gram matrix).
    """
    Q = np.asarray(Q, dtype=float)
    problem = generator_problems(Q, Q.shape[0])
    if problem:
        raise ValidationError(f"invalid generator: {problem}")
    f = np.asarray(f_values, dtype=float)
    pr = p.p
    if f.ndim == 1:
        f = f[:, None]
        dy = np.asarray(dy, dtype=float)[..., None]
    if gram is None:
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim == 0:
            if sig <= 0:
                raise ValidationError("observation volatility must be positive", sigma=float(sig))
            gram = np.array([[float(sig) ** 2]])
        else:
            gram = sig @ _t(sig)
    gram_inv, _ = gram_inverse(np.asarray(gram, dtype=float))
    fhat = np.einsum("...k,...ki->...i", pr, f)
    gain = np.einsum("...ki,...ij->...kj", f - fhat[..., None, :], gram_inv)
    innovation = dy - fhat * dt
    new = pr + (pr @ Q) * dt + pr * np.einsum("...ki,...i->...k", gain, innovation)
    new = np.clip(new, 0.0, None)
    total = new.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise NumericalError("Wonham step lost all probability mass")
    return SimplexFilterState(p=new / total)


def _chain_drifts(spec: ModelSpec, t: float, y: np.ndarray) -> np.ndarray:
    states = np.asarray(spec.x0_law.states, dtype=float)
    return observation_drift(spec, t, states, np.asarray(y, dtype=float)[..., None, :])


def wonham_model_step(spec: ModelSpec, t: float, state: SimplexFilterState, y: np.ndarray,
                      dy: np.ndarray, dt: float,
                      shift: Optional[np.ndarray] = None) -> SimplexFilterState:
    geo = observation_geometry(spec, t, y)
    f = _chain_drifts(spec, t, y)
    if shift is not None:
        f = f - _observation_shift(spec, t, y, shift)[..., None, :]
    return wonham_step(spec.chain_generator, geo.restrict(f), geo.sigma_y, state,
                       geo.restrict(dy), dt, gram=geo.gram)


def init_particle_cloud(spec: ModelSpec, n_particles: int,
                        rngs: List[np.random.Generator]) -> ParticleCloud:
    """Sample ``n_particles`` from the initial law for each stream in ``rngs``."""
    if n_particles < MIN_PARTICLES:
        raise ValidationError(f"particle filter needs at least {MIN_PARTICLES} particles",
                              n_particles=n_particles)
    law = spec.x0_law
    state_index = None
    if spec.is_chain:
        cum = np.cumsum(law.probs)
        u = np.stack([rng.random(n_particles) for rng in rngs])
        state_index = np.minimum(np.searchsorted(cum, u, side="right"), cum.size - 1)
        particles = law.states[state_index].astype(float)
    else:
        root = psd_sqrt(law.cov, name="P0")
        z = np.stack([rng.standard_normal((n_particles, spec.dims.n)) for rng in rngs])
        particles = law.mean + z @ root.T
    return ParticleCloud(particles=particles, log_weights=np.zeros(particles.shape[:-1]),
                         rngs=list(rngs), payload=np.zeros(particles.shape[:-1]),
                         state_index=state_index)


def _systematic_resample(cloud: ParticleCloud, rows: np.ndarray) -> ParticleCloud:
    N = cloud.n_particles
    w = cloud.weights
    particles = cloud.particles.copy()
    payload = None if cloud.payload is None else cloud.payload.copy()
    state_index = None if cloud.state_index is None else cloud.state_index.copy()
    log_weights = cloud.log_weights.copy()
    for r in rows:
        u = (cloud.rngs[r].random() + np.arange(N)) / N
        idx = np.minimum(np.searchsorted(np.cumsum(w[r]), u), N - 1)
        particles[r] = cloud.particles[r, idx]
        if payload is not None:
            payload[r] = cloud.payload[r, idx]
        if state_index is not None:
            state_index[r] = cloud.state_index[r, idx]
        log_weights[r] = 0.0
    return ParticleCloud(particles, log_weights, cloud.rngs, payload, state_index)


def particle_step(spec: ModelSpec, cloud: ParticleCloud, t: float, y: np.ndarray,
                  dy: np.ndarray, dt: float, shift: Optional[np.ndarray] = None,
                  payload_rate: Optional[Callable[..., np.ndarray]] = None) -> ParticleCloud:
    """Weight, propagate and (when ESS < N/2) resample the particle cloud.

    Each particle is weighted by the Gaussian density of the observed
    increment and then moved with the Euler kernel of X conditioned on that
    increment: dW = Sigma^Y' G^{-1} r + (I - P) xi sqrt(dt), r the residual.
    ``payload_rate(t, x, y)`` accumulates a running integral per particle.

    Raises:
        ValidationError: Fewer than 100 particles.
        DegenerateLikelihoodError: Every particle of some path lost its weight.
    """
    N = cloud.n_particles
    if N < MIN_PARTICLES:
        raise ValidationError(f"particle filter needs at least {MIN_PARTICLES} particles",
                              n_particles=N)
    y = np.asarray(y, dtype=float)
    x = cloud.particles
    yb = y[..., None, :]
    geo = observation_geometry(spec, t, y)
    gram_inv = geo.gram_inv if geo.gram_inv.ndim == 2 else geo.gram_inv[..., None, :, :]
    sigma_y = geo.sigma_y if geo.sigma_y.ndim == 2 else geo.sigma_y[..., None, :, :]

    aY = observation_drift(spec, t, x, yb)
    if shift is not None:
        aY = aY - _observation_shift(spec, t, y, shift)[..., None, :]
    residual = geo.restrict(np.asarray(dy, dtype=float))[..., None, :] - geo.restrict(aY) * dt
    loglik = -0.5 * np.einsum("...i,...ij,...j->...", residual, gram_inv, residual) / dt
    log_weights = cloud.log_weights + loglik
    top = np.max(log_weights, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateLikelihoodError("all particle weights underflowed",
                                        t=float(t), n_particles=N)
    log_weights = log_weights - top

    payload = cloud.payload
    if payload_rate is not None:
        payload = payload + payload_rate(t, x, yb) * dt

    state_index = cloud.state_index
    if spec.is_chain:
        cum = np.cumsum(linalg.expm(spec.chain_generator * dt), axis=1)
        u = np.stack([rng.random(N) for rng in cloud.rngs])
        rows = cum[state_index]
        state_index = np.minimum((u[..., None] > rows).sum(axis=-1), rows.shape[-1] - 1)
        x_new = spec.x0_law.states[state_index].astype(float)
    else:
        d = spec.dims.d
        xi = np.stack([rng.standard_normal((N, d)) for rng in cloud.rngs]) * np.sqrt(dt)
        w_obs = np.einsum("...id,...ij,...j->...d", sigma_y, gram_inv, residual)
        proj = np.einsum("...id,...ij,...je,...e->...d", sigma_y, gram_inv, sigma_y, xi)
        dW = w_obs + xi - proj
        b = spec.b.evaluate_flat(t, x, yb)
        Lam = spec.Lambda.evaluate(t, x, yb)
        if shift is not None:
            b = b - np.einsum("...id,...d->...i", Lam, shift[..., None, :])
        x_new = x + b * dt + np.einsum("...id,...d->...i", Lam, dW)

    out = ParticleCloud(x_new, log_weights, cloud.rngs, payload, state_index)
    low = np.flatnonzero(np.atleast_1d(out.ess) < 0.5 * N)
    if low.size:
        out = _systematic_resample(out, low)
    return out


def innovations_increment(spec: ModelSpec, t: float, y: np.ndarray, dy: np.ndarray,
                          hat_aY: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Innovations increments over one step.

    Returns:
        tuple: ``dW_tilde`` (..., d), the minimum-norm solution of
        Sigma^Y dW = dy - a^Y_hat dt, and ``dU`` (..., r), the standardized
        innovation G^{-1/2}(dy - a^Y_hat dt) over the r active rows.
    """
    geo = observation_geometry(spec, t, y)
    residual = geo.restrict(np.asarray(dy, dtype=float) - np.asarray(hat_aY, dtype=float) * dt)
    dU = _mv(geo.gram_inv_sqrt, residual)
    return geo.min_norm_noise(residual), dU


class ZetaExtractor:
    """Reads a filter update as dzeta = G dt + H dY.

    KF/EKF: zeta = (m, vech Pi); the Pi block has H = 0.
    Wonham: zeta = p.
    """

    def __init__(self, spec: ModelSpec, kind: str) -> None:
        kind = normalize_kind(kind)
        if kind == "particle":
            raise UnsupportedModelError("the particle filter has no finite-dimensional zeta",
                                        filter_kind=kind)
        if kind == "Wonham" and not spec.is_chain:
            raise UnsupportedModelError("Wonham filter needs a hidden Markov chain")
        if kind != "Wonham" and spec.is_chain:
            raise UnsupportedModelError(f"{kind} filter needs a Gaussian hidden factor")
        self.spec = spec
        self.kind = kind
        n = spec.dims.n
        self.q = spec.x0_law.states.shape[0] if kind == "Wonham" else n + n * (n + 1) // 2

    def zeta(self, state: FilterState) -> np.ndarray:
        if self.kind == "Wonham":
            return state.p
        cov = np.broadcast_to(state.cov, state.mean.shape[:-1] + state.cov.shape[-2:])
        return np.concatenate([state.mean, vech(cov)], axis=-1)

    def state_from_zeta(self, zeta: np.ndarray) -> FilterState:
        if self.kind == "Wonham":
            return SimplexFilterState(p=zeta)
        n = self.spec.dims.n
        return GaussianFilterState(mean=zeta[..., :n], cov=unvech(zeta[..., n:], n))

    def drift_diffusion(self, t: float, state: FilterState, y: np.ndarray) -> FilterDriftDiffusion:
        spec = self.spec
        y = np.asarray(y, dtype=float)
        geo = observation_geometry(spec, t, y)
        mY = spec.dims.mY
        if self.kind == "Wonham":
            pr = state.p
            f = geo.restrict(_chain_drifts(spec, t, y))
            fhat = np.einsum("...k,...ki->...i", pr, f)
            gain = pr[..., None] * np.einsum("...ki,...ij->...kj", f - fhat[..., None, :],
                                             geo.gram_inv)
            G = pr @ spec.chain_generator - np.einsum("...ki,...i->...k", gain, fhat)
            H = np.zeros(gain.shape[:-1] + (mY,))
            H[..., geo.active] = gain
            return FilterDriftDiffusion(G=G, H=H, G_hat=G + np.einsum("...ki,...i->...k", gain, fhat))

        lin = (kf_linearization(spec, t, y) if self.kind == "KF"
               else ekf_linearize(spec, t, state, y))
        m, cov = state.mean, state.cov
        Lam = _lambda(spec, t, m, y)
        A_a, cross, K = _gain_terms(geo, lin, cov, Lam)
        a_hat = geo.restrict(lin.abar) + _mv(A_a, m)
        G_m = lin.bbar + _mv(lin.B, m) - _mv(K, a_hat)
        batch = m.shape[:-1]
        riccati = vech(_riccati_rhs(lin, cov, Lam, cross, geo.gram_inv))
        G = np.concatenate([G_m, np.broadcast_to(riccati, batch + riccati.shape[-1:])], axis=-1)
        n = spec.dims.n
        H = np.zeros(batch + (self.q, mY))
        H[..., :n, geo.active] = np.broadcast_to(K, batch + K.shape[-2:])
        G_hat = G.copy()
        G_hat[..., :n] += _mv(np.broadcast_to(K, batch + K.shape[-2:]), a_hat)
        return FilterDriftDiffusion(G=G, H=H, G_hat=G_hat)

    def replay(self, t: float, state: FilterState, y: np.ndarray, dy: np.ndarray,
               dt: float) -> np.ndarray:
        """zeta + G dt + H dy: one step rebuilt from the drift/diffusion form."""
        dd = self.drift_diffusion(t, state, y)
        return self.zeta(state) + dd.G * dt + np.einsum("...qi,...i->...q", dd.H, dy)


def filter_as_zeta(spec: ModelSpec, filter_kind: str) -> ZetaExtractor:
    return ZetaExtractor(spec, filter_kind)


def initial_filter_state(spec: ModelSpec, kind: str, n_paths: int,
                         path_ids: Optional[np.ndarray] = None,
                         n_particles: int = DEFAULT_PARTICLES, seed: int = 0) -> FilterState:
    kind = normalize_kind(kind)
    law = spec.x0_law
    if kind == "Wonham":
        if not spec.is_chain:
            raise UnsupportedModelError("Wonham filter needs a hidden Markov chain")
        return SimplexFilterState(p=np.tile(law.probs.astype(float), (n_paths, 1)))
    if kind == "particle":
        ids = np.arange(n_paths) if path_ids is None else path_ids
        return init_particle_cloud(spec, n_particles, [particle_stream(seed, int(i)) for i in ids])
    if spec.is_chain:
        raise UnsupportedModelError(f"{kind} filter needs a Gaussian hidden factor")
    if kind == "KF" and not is_linear_model(spec):
        raise UnsupportedModelError("Kalman-Bucy filter needs affine drift coefficients",
                                    filter_kind=kind)
    mean = np.tile(law.mean.astype(float), (n_paths, 1))
    cov = law.cov.astype(float)
    if kind == "EKF":
        cov = np.tile(cov, (n_paths, 1, 1))
    return GaussianFilterState(mean=mean, cov=cov)


def filter_step(spec: ModelSpec, kind: str, t: float, state: FilterState, y: np.ndarray,
                dy: np.ndarray, dt: float, shift: Optional[np.ndarray] = None,
                payload_rate: Optional[Callable[..., np.ndarray]] = None) -> FilterState:
    if kind == "KF":
        return kalman_bucy_step(spec, t, state, y, dy, dt, shift)
    if kind == "EKF":
        return ekf_step(spec, t, state, y, dy, dt, shift)
    if kind == "Wonham":
        return wonham_model_step(spec, t, state, y, dy, dt, shift)
    return particle_step(spec, state, t, y, dy, dt, shift, payload_rate)


def state_mean(spec: ModelSpec, state: FilterState) -> np.ndarray:
    if isinstance(state, SimplexFilterState):
        return state.p @ np.asarray(spec.x0_law.states, dtype=float)
    return state.mean


@dataclass(eq=False)
class FilterTrajectory:
    """Filter output on a batch of observation paths (time-major)."""

    kind: str
    grid: Any
    path_ids: np.ndarray
    means: np.ndarray
    a1_hat: np.ndarray
    c_hat: np.ndarray
    aY_hat: np.ndarray
    covs: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    ess: Optional[np.ndarray] = None
    payload: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return int(self.path_ids.size)

    def state_at(self, j: int) -> FilterState:
        if self.probs is not None:
            return SimplexFilterState(p=self.probs[j])
        return GaussianFilterState(mean=self.means[j], cov=self.covs[j])


class FilterRunner:
    """Steps one filter along a batch of paths and records means and hat coefficients."""

    def __init__(self, spec: ModelSpec, kind: str, grid: Any, path_ids: np.ndarray,
                 n_particles: int = DEFAULT_PARTICLES, seed: int = 0,
                 payload_rate: Optional[Callable[..., np.ndarray]] = None) -> None:
        self.spec = spec
        self.kind = normalize_kind(kind)
        self.grid = grid
        self.path_ids = np.asarray(path_ids)
        self.payload_rate = payload_rate
        self.state = initial_filter_state(spec, self.kind, self.path_ids.size,
                                          self.path_ids, n_particles, seed)
        self._records: Dict[str, List[np.ndarray]] = {key: [] for key in
                                                      ("means", "a1", "c", "aY", "covs", "probs", "ess")}
        y0 = np.broadcast_to(spec.y0, (self.path_ids.size, spec.dims.mY))
        self._record(grid.t0, y0)

    @property
    def mean(self) -> np.ndarray:
        return state_mean(self.spec, self.state)

    def _record(self, t: float, y: np.ndarray) -> None:
        from sepfilter.core.moments import hat_coefficients

        a1, c, aY = hat_coefficients(self.spec, t, self.state, y)
        rec = self._records
        N = self.path_ids.size
        rec["means"].append(np.array(self.mean))
        rec["a1"].append(np.broadcast_to(a1, (N,) + a1.shape[-1:]).copy())
        rec["c"].append(np.broadcast_to(c, (N,)).copy())
        rec["aY"].append(np.broadcast_to(aY, (N,) + aY.shape[-1:]).copy())
        if isinstance(self.state, SimplexFilterState):
            rec["probs"].append(self.state.p.copy())
        else:
            cov = self.state.cov
            n = self.spec.dims.n
            rec["covs"].append(np.broadcast_to(cov, (N, n, n)).copy())
        if isinstance(self.state, ParticleCloud):
            rec["ess"].append(np.atleast_1d(self.state.ess).copy())

    def step(self, j: int, t: float, y: np.ndarray, dy: np.ndarray, dt: float,
             shift: Optional[np.ndarray] = None) -> None:
        self.state = filter_step(self.spec, self.kind, t, self.state, y, dy, dt, shift,
                                 self.payload_rate)
        self._record(t + dt, y + dy)

    def trajectory(self) -> FilterTrajectory:
        rec = self._records
        return FilterTrajectory(
            kind=self.kind, grid=self.grid, path_ids=self.path_ids,
            means=np.stack(rec["means"]), a1_hat=np.stack(rec["a1"]),
            c_hat=np.stack(rec["c"]), aY_hat=np.stack(rec["aY"]),
            covs=np.stack(rec["covs"]) if rec["covs"] else None,
            probs=np.stack(rec["probs"]) if rec["probs"] else None,
            ess=np.stack(rec["ess"]) if rec["ess"] else None,
            payload=(self.state.payload.copy()
                     if isinstance(self.state, ParticleCloud) and self.state.payload is not None
                     else None),
        )


def make_filter_runner(spec: ModelSpec, kind: str, grid: Any, path_ids: np.ndarray,
                       n_particles: int = DEFAULT_PARTICLES, seed: int = 0) -> FilterRunner:
    return FilterRunner(spec, kind, grid, path_ids, n_particles=n_particles, seed=seed)


def run_filter(spec: ModelSpec, kind: str, paths: Any, *, n_particles: int = DEFAULT_PARTICLES,
               seed: Optional[int] = None, use_shift: bool = False,
               payload_rate: Optional[Callable[..., np.ndarray]] = None) -> FilterTrajectory:
    """Run a filter along every observation path of a PathBundle.

    Args:
        spec: Model.
        kind: ``KF``, ``EKF``, ``Wonham`` or ``particle``.
        paths: PathBundle supplying Y on its grid.
        n_particles: Cloud size for the particle filter.
        seed: Particle stream seed (defaults to the bundle seed).
        use_shift: Filter the Ph dynamics using the drift shift stored on the bundle.
        payload_rate: Running integrand carried by the particles.

    Returns:
        FilterTrajectory: Means, covariances or probabilities, hat
        coefficients and ESS on every grid node.
    """
    kind = normalize_kind(kind)
    if use_shift and paths.shift is None:
        raise ValidationError("paths carry no drift shift", measure=paths.measure_tag)
    runner = FilterRunner(spec, kind, paths.grid, paths.path_ids, n_particles=n_particles,
                          seed=paths.seed if seed is None else seed, payload_rate=payload_rate)
    grid = paths.grid
    dY = paths.dY
    logger.debug(f"Filter - running {kind} on {paths.n_paths} paths, {grid.steps} steps")
    for j in range(grid.steps):
        shift = paths.shift[j] if use_shift else None
        runner.step(j, grid.time(j), paths.Y_path[j], dY[j], grid.dt, shift)
    return runner.trajectory()


@dataclass(eq=False)
class RiccatiSolution:
    times: np.ndarray
    covs: np.ndarray
    _dense: Any = field(repr=False, default=None)

    def at(self, t: float) -> np.ndarray:
        n = self.covs.shape[-1]
        return unvech(self._dense(t), n)


def riccati_ode(spec: ModelSpec, grid: Any, cov0: Optional[np.ndarray] = None) -> RiccatiSolution:
    """Kalman-Bucy covariance on the grid by integrating the Riccati ODE.

    Raises:
        UnsupportedModelError: Non-affine drifts, a hidden chain, or
            diffusions that depend on the observation.
    """
    if spec.is_chain or not is_linear_model(spec):
        raise UnsupportedModelError("Riccati ODE needs a linear-Gaussian model")
    if spec.diffusion_depends_on_y or spec.Lambda.depends_on_y or spec.Lambda.depends_on_x:
        raise UnsupportedModelError("Riccati ODE needs state-independent diffusions")
    n = spec.dims.n
    y0 = np.asarray(spec.y0, dtype=float)

    def rhs(t: float, v: np.ndarray) -> np.ndarray:
        cov = unvech(v, n)
        lin = kf_linearization(spec, t, y0)
        geo = observation_geometry(spec, t, y0)
        Lam = _lambda(spec, t, spec.x_reference, y0)
        _, cross, _ = _gain_terms(geo, lin, cov, Lam)
        return vech(symmetrize(_riccati_rhs(lin, cov, Lam, cross, geo.gram_inv)))

    P0 = spec.x0_law.cov if cov0 is None else np.asarray(cov0, dtype=float)
    times = grid.times
    sol = solve_ivp(rhs, (times[0], times[-1]), vech(np.asarray(P0, dtype=float)),
                    t_eval=times, rtol=1e-10, atol=1e-12, dense_output=True)
    if not sol.success:
        raise NumericalError(f"Riccati ODE failed: {sol.message}")
    return RiccatiSolution(times=sol.t, covs=unvech(sol.y.T, n), _dense=sol.sol)


def innovation_quadratic_variation(spec: ModelSpec, traj: FilterTrajectory,
                                   paths: Any) -> Dict[str, Any]:
    """Per-component quadratic variation of the standardized innovation U.

    Each component should accumulate T - t0. The O(dt) contribution of the
    filter error (a^Y - a^Y_hat) dt is estimated from the simulated X and
    reported as ``discretization_bias``.
    """
    check = ~paths.diverged
    grid = paths.grid
    dY = paths.dY
    qv = 0.0
    bias = 0.0
    for j in range(grid.steps):
        t = grid.time(j)
        y = paths.Y_path[j]
        _, dU = innovations_increment(spec, t, y, dY[j], traj.aY_hat[j], grid.dt)
        qv = qv + dU * dU
        geo = observation_geometry(spec, t, y)
        err = geo.restrict(observation_drift(spec, t, paths.X_path[j], y) - traj.aY_hat[j])
        err = np.einsum("...ij,...j->...i", geo.gram_inv_sqrt, err) * grid.dt
        bias = bias + err * err
    qv = np.asarray(qv)[check]
    bias = np.asarray(bias)[check]
    n = max(int(qv.shape[0]), 1)
    mean = qv.mean(axis=0)
    stderr = qv.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    target = grid.T - grid.t0
    expected = target + bias.mean(axis=0)
    within = np.abs(mean - expected) <= 3.0 * stderr + 1e-12
    return {"target": target, "mean": mean.tolist(), "stderr": stderr.tolist(),
            "discretization_bias": bias.mean(axis=0).tolist(), "n_paths": n,
            "within": within.tolist(), "status": "PASS" if bool(np.all(within)) else "FAIL"}


def trajectory_frame(traj: FilterTrajectory) -> pd.DataFrame:
    """Long-format frame: path_id, step, t, m_*, vechPi_* or p_*, ess."""
    steps1, N, n = traj.means.shape
    step = np.repeat(np.arange(steps1), N)
    data: Dict[str, Any] = {"path_id": np.tile(traj.path_ids, steps1), "step": step,
                            "t": traj.grid.t0 + traj.grid.dt * step}
    for i in range(n):
        data[f"m_{i}"] = traj.means[:, :, i].reshape(-1)
    if traj.probs is not None:
        for i in range(traj.probs.shape[-1]):
            data[f"p_{i}"] = traj.probs[:, :, i].reshape(-1)
    elif traj.covs is not None:
        packed = vech(traj.covs)
        for i in range(packed.shape[-1]):
            data[f"vechPi_{i}"] = packed[:, :, i].reshape(-1)
    data["ess"] = (traj.ess.reshape(-1) if traj.ess is not None
                   else np.full(steps1 * N, np.nan))
    frame = pd.DataFrame(data)
    return frame.sort_values(["path_id", "step"], kind="mergesort").reset_index(drop=True)


def filter_report(traj: FilterTrajectory, oracle: FilterTrajectory) -> Dict[str, Any]:
    """Compare a filter with the particle oracle on the same paths.

    The band is 0.05 sqrt(trace Pi) averaged over time and paths; ``within_band``
    is True when the mean RMSE stays inside it.
    """
    if not np.array_equal(traj.path_ids, oracle.path_ids):
        raise ValidationError("filter and oracle trajectories cover different paths")
    err = traj.means - oracle.means
    rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=-1))))
    covs = traj.covs if traj.covs is not None else oracle.covs
    band = 0.05 * float(np.mean(np.sqrt(np.maximum(np.trace(covs, axis1=-2, axis2=-1), 0.0)))) \
        if covs is not None else float("nan")
    report: Dict[str, Any] = {
        "filter_kind": traj.kind, "oracle_kind": oracle.kind,
        "rmse": rmse, "band": band, "within_band": bool(rmse <= band),
    }
    if oracle.ess is not None:
        report["ess_min"] = float(np.min(oracle.ess))
        report["ess_mean"] = float(np.mean(oracle.ess))
    logger.info(f"Filter report - {traj.kind} vs {oracle.kind}: rmse {rmse:.4g}, band {band:.4g}")
    return report
