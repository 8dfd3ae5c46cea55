#!/usr/bin/env python3
"""
Risk-Sensitive Criteria
=======================

Monte-Carlo estimators of the risk-sensitive benchmarked criterion and the
measure-change machinery behind its separated forms.

Features:
- Integrands g and g_hat, Doleans-Dade exponentials chi, chi_hat and the
  Psi^Z / Psi^X weights, all carried per path in log space
- Estimators of J (full filtration), J_hat (observation filtration),
  J^h (control measure), J_bar (reference measure)
- Equivalence experiment, martingale battery, Kazamaki statistics and the
  Kallianpur-Striebel check on common-noise clusters
- Chunked path batches on a thread pool; chunk results merged in order

The g-form criteria carry no e^{-theta r0} factor, so J = J^h + r0; the
offset is added back wherever they are compared with J.
"""

import concurrent.futures
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from sepfilter.core.errors import EstimationError, ValidationError
from sepfilter.core.filters import (
    FilterRunner,
    ParticleCloud,
    default_filter_kind,
    innovations_increment,
    run_filter,
)
from sepfilter.core.model import ModelSpec, observation_drift, observation_geometry, sigma1
from sepfilter.core.sde_engine import (
    PathBundle,
    Strategy,
    TimeGrid,
    simulate_joint,
    simulate_R_original,
    simulate_R_separated,
    strategy_path,
)
from sepfilter.core.utils import LogMeanAccumulator, hill_tail_index
from sepfilter.monitoring.resource_monitor import get_resource_monitor

# Configure logger
logger = logging.getLogger(__name__)

DEFAULT_CHUNK_PATHS = 2048
HEAVY_TAIL_INDEX = 2.0
KS_PASS_FRACTION = 0.95
MIN_CLUSTER_SIZE = 10
Z_TOLERANCE = 3.0


@dataclass(frozen=True)
class RiskSensitiveParams:
    """theta in (-1, 0) or (0, inf), horizon T and initial log excess return r0 > 0."""

    theta: float
    T: float
    r0: float = 1.0

    def __post_init__(self) -> None:
        if self.theta == 0.0:
            raise ValidationError("risk sensitivity theta must be non-zero")
        if self.theta <= -1.0:
            raise ValidationError("risk sensitivity theta must exceed -1", theta=self.theta)
        if self.r0 <= 0.0:
            raise ValidationError("r0 must be positive", r0=self.r0)
        if self.T <= 0.0:
            raise ValidationError("horizon T must be positive", T=self.T)
        if self.theta < 0.0:
            logger.warning(f"theta = {self.theta}: overbetting regime, well-posedness not guaranteed")

    @classmethod
    def from_dict(cls, block: Dict[str, Any], T: float) -> "RiskSensitiveParams":
        if "theta" not in block:
            raise ValidationError("params block needs 'theta'")
        return cls(theta=float(block["theta"]), T=float(block.get("T", T)),
                   r0=float(block.get("r0", 1.0)))

    def to_dict(self) -> Dict[str, float]:
        return {"theta": self.theta, "T": self.T, "r0": self.r0}


def g_form_offset(params: RiskSensitiveParams) -> float:
    """Constant separating the g-form criteria from J (the e^{-theta r0} factor)."""
    return params.r0


@dataclass(frozen=True)
class MonteCarloSettings:
    n_paths: int
    seed: int = 0
    antithetic: bool = False
    chunk_paths: int = DEFAULT_CHUNK_PATHS
    workers: Optional[int] = None

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValidationError("at least one path is required", n_paths=self.n_paths)
        if self.chunk_paths < 1:
            raise ValidationError("chunk size must be positive", chunk_paths=self.chunk_paths)

    @classmethod
    def from_env(cls, n_paths: int, seed: int = 0, antithetic: bool = False,
                 workers: Optional[int] = None) -> "MonteCarloSettings":
        chunk = int(os.getenv("SEPFILTER_CHUNK_PATHS", str(DEFAULT_CHUNK_PATHS)))
        return cls(n_paths=n_paths, seed=seed, antithetic=antithetic, chunk_paths=chunk,
                   workers=workers)

    def chunks(self, align: int = 1) -> List[Tuple[int, int]]:
        size = max(align, (self.chunk_paths // align) * align)
        return [(start, min(size, self.n_paths - start)) for start in range(0, self.n_paths, size)]


@dataclass
class CriterionEstimate:
    J_value: float
    I_value: float
    stderr_I: float
    n_paths: int
    n_diverged: int
    measure_tag: str
    filtration_tag: str
    stderr_J: float = 0.0
    log_I: float = 0.0
    theta: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "J_value": self.J_value, "I_value": self.I_value, "stderr_I": self.stderr_I,
            "n_paths": self.n_paths, "n_diverged": self.n_diverged,
            "measure_tag": self.measure_tag, "filtration_tag": self.filtration_tag,
            "stderr_J": self.stderr_J, "log_I": self.log_I, "theta": self.theta,
        }


@dataclass
class LogWeightLedger:
    """Per-path running log-weights and integrals on one batch of paths."""

    n_paths: int
    log_chi: np.ndarray = None
    log_chi_hat: np.ndarray = None
    log_psi_z: np.ndarray = None
    log_psi_x: np.ndarray = None
    int_g: np.ndarray = None
    int_g_hat: np.ndarray = None
    kaz_x1: np.ndarray = None
    kaz_z1: np.ndarray = None
    kaz_x2: np.ndarray = None
    kaz_z2: np.ndarray = None

    def __post_init__(self) -> None:
        for name in ("log_chi", "log_chi_hat", "log_psi_z", "log_psi_x", "int_g", "int_g_hat",
                     "kaz_x1", "kaz_z1", "kaz_x2", "kaz_z2"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_paths))


def control_integrand(spec: ModelSpec, t: float, y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """u = h' Sigma^(1) - Xi as a d-vector (batched)."""
    S1 = sigma1(spec, t, y)
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    return np.einsum("...i,...id->...d", h, S1) - xi


def _g_formula(theta: float, hS: np.ndarray, xi: np.ndarray, h: np.ndarray,
               a1: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (0.5 * (theta + 1.0) * np.sum(hS * hS, axis=-1) - np.sum(h * a1, axis=-1)
            - theta * np.sum(hS * xi, axis=-1) + c + 0.5 * (theta - 1.0) * np.sum(xi * xi, axis=-1))


def g_integrand(spec: ModelSpec, params: RiskSensitiveParams, t: float, x: np.ndarray,
                y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """g = (theta+1)/2 |h'S1|^2 - h'a1 - theta h'S1 Xi' + c + (theta-1)/2 |Xi|^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    S1 = sigma1(spec, t, y)
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    hS = np.einsum("...i,...id->...d", h, S1)
    a1 = spec.a.evaluate_flat(t, x, y)[..., : spec.dims.m1]
    c = spec.c.evaluate_flat(t, x, y)[..., 0]
    return _g_formula(params.theta, hS, xi, h, a1, c)


def g_hat_integrand(spec: ModelSpec, params: RiskSensitiveParams, t: float, state: Any,
                    y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """g with a^(1) and c replaced by their filter expectations under ``state``."""
    from sepfilter.core.moments import hat_coefficients

    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    a1_hat, c_hat, _ = hat_coefficients(spec, t, state, y)
    S1 = sigma1(spec, t, y)
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    hS = np.einsum("...i,...id->...d", h, S1)
    return _g_formula(params.theta, hS, xi, h, a1_hat, c_hat)


def accumulate_doleans(ledger: LogWeightLedger, spec: ModelSpec, t: float, y: np.ndarray,
                       h: np.ndarray, dw: np.ndarray, dt: float, theta: float,
                       target: str = "log_chi") -> LogWeightLedger:
    """log chi += -theta u dW - 1/2 theta^2 |u|^2 dt (pass dW_tilde for chi_hat)."""
    u = control_integrand(spec, t, y, h)
    step = -theta * np.sum(u * dw, axis=-1) - 0.5 * theta * theta * np.sum(u * u, axis=-1) * dt
    setattr(ledger, target, getattr(ledger, target) + step)
    return ledger


def a_check(spec: ModelSpec, t: float, y: np.ndarray, aY_hat: np.ndarray,
            h: np.ndarray, theta: float) -> np.ndarray:
    """a^Y_hat - theta Sigma^Y (Sigma^(1)' h - Xi')."""
    geo = observation_geometry(spec, t, y)
    s = theta * control_integrand(spec, t, y, h)
    return geo.expand(geo.restrict(aY_hat) - np.einsum("...id,...d->...i", geo.sigma_y, s))


def accumulate_psiZ(ledger: LogWeightLedger, spec: ModelSpec, t: float, y: np.ndarray,
                    drift: np.ndarray, dy: np.ndarray, dt: float,
                    target: str = "log_psi_z") -> LogWeightLedger:
    """log Psi += drift' G^{-1} (dy - drift dt) + 1/2 drift' G^{-1} drift dt over active rows.

    With ``drift`` = a_check this is log Psi^Z; with the full-information
    drift a^Y - Sigma^Y s it is log Psi^X.

    The observation increment ``dy`` stands in for the control-measure
    innovation: over the active rows dy - a_check dt = Sigma^Y dW_tilde^h, so
    the step equals a_check' G^{-1} Sigma^Y dW_tilde^h + 1/2 a_check' G^{-1} a_check dt.
    The strategy h and theta enter through ``drift`` (see ``a_check``).
    """
    geo = observation_geometry(spec, t, y)
    a = geo.restrict(drift)
    dy_a = geo.restrict(dy)
    step = geo.quadratic(a, dy_a) - 0.5 * geo.quadratic(a, a) * dt
    setattr(ledger, target, getattr(ledger, target) + step)
    return ledger


def _innovation_form(geo: Any, drift: np.ndarray, dy: np.ndarray, dt: float) -> np.ndarray:
    """drift' G^{-1} dy - drift' G^{-1} drift dt over active rows."""
    return geo.quadratic(drift, dy) - geo.quadratic(drift, drift) * dt


def build_ledger(spec: ModelSpec, strategy: Strategy, theta: float, paths: PathBundle,
                 filter_trajectory: Any = None) -> LogWeightLedger:
    """Accumulate every log-weight the inputs allow along a batch of paths.

    chi and the first X-form Kazamaki exponent need the model increments and
    are filled on P paths only; hat quantities need a filter trajectory.
    """
    grid = paths.grid
    N = paths.n_paths
    traj = filter_trajectory if filter_trajectory is not None else paths.filter_trajectory
    h_path = strategy_path(strategy, grid, N, traj)
    dY = paths.dY
    ledger = LogWeightLedger(n_paths=N)
    m1, dt = spec.dims.m1, grid.dt
    true_dw = paths.dW if paths.measure_tag == "P" else None
    for j in range(grid.steps):
        t = grid.time(j)
        x, y, h = paths.X_path[j], paths.Y_path[j], h_path[j]
        geo = observation_geometry(spec, t, y)
        S1 = sigma1(spec, t, y)
        xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
        hS = np.einsum("...i,...id->...d", h, S1)
        u = hS - xi
        a1 = spec.a.evaluate_flat(t, x, y)[..., :m1]
        c = spec.c.evaluate_flat(t, x, y)[..., 0]
        ledger.int_g += _g_formula(theta, hS, xi, h, a1, c) * dt

        dy_a = geo.restrict(dY[j])
        a_dag = a_check(spec, t, y, observation_drift(spec, t, x, y), h, theta)
        accumulate_psiZ(ledger, spec, t, y, a_dag, dY[j], dt, target="log_psi_x")
        ledger.kaz_x2 += -0.5 * _innovation_form(geo, geo.restrict(a_dag), dy_a, dt)

        if true_dw is not None:
            accumulate_doleans(ledger, spec, t, y, h, true_dw[j], dt, theta)
            ledger.kaz_x1 += -0.5 * theta * np.sum(u * true_dw[j], axis=-1)

        if traj is not None:
            dw_tilde, _ = innovations_increment(spec, t, y, dY[j], traj.aY_hat[j], dt)
            accumulate_doleans(ledger, spec, t, y, h, dw_tilde, dt, theta, target="log_chi_hat")
            ledger.kaz_z1 += -0.5 * theta * np.sum(u * dw_tilde, axis=-1)
            ledger.int_g_hat += _g_formula(theta, hS, xi, h, traj.a1_hat[j], traj.c_hat[j]) * dt
            a_chk = a_check(spec, t, y, traj.aY_hat[j], h, theta)
            accumulate_psiZ(ledger, spec, t, y, a_chk, dY[j], dt)
            ledger.kaz_z2 += -0.5 * _innovation_form(geo, geo.restrict(a_chk), dy_a, dt)
    return ledger


@dataclass
class ChunkResult:
    """Log-weights per named quantity (non-diverged paths only)."""

    offset: int
    n_paths: int
    n_diverged: int
    log_weights: Dict[str, np.ndarray] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)


QuantityFn = Callable[[PathBundle, Any, LogWeightLedger], Dict[str, np.ndarray]]


def _simulate_chunk(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                    grid: TimeGrid, mc: MonteCarloSettings, measure: str,
                    filter_kind: Optional[str], need_filter: bool, quantities: QuantityFn,
                    offset: int, count: int) -> ChunkResult:
    theta = params.theta
    online_kind = filter_kind if strategy.is_feedback else None
    paths = simulate_joint(spec, grid, mc.seed, count, measure=measure, strategy=strategy,
                           theta=theta, path_offset=offset, antithetic=mc.antithetic,
                           filter_kind=online_kind)
    traj = paths.filter_trajectory
    if need_filter and traj is None:
        traj = run_filter(spec, filter_kind, paths)
    ledger = build_ledger(spec, strategy, theta, paths, traj)
    values = quantities(paths, traj, ledger)
    keep = ~paths.diverged
    return ChunkResult(offset=offset, n_paths=count, n_diverged=int(np.sum(paths.diverged)),
                       log_weights={k: np.asarray(v)[keep] for k, v in values.items()})


def run_chunks(work: Callable[[int, int], ChunkResult], mc: MonteCarloSettings,
               align: int = 1) -> List[ChunkResult]:
    """Run ``work(offset, count)`` over all chunks; results come back in chunk order."""
    chunks = mc.chunks(align)
    workers = mc.workers or get_resource_monitor().recommended_workers(len(chunks))
    start_time = time.time()
    if workers <= 1 or len(chunks) == 1:
        results = [work(offset, count) for offset, count in chunks]
    else:
        results: List[Optional[ChunkResult]] = [None] * len(chunks)
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_index = {executor.submit(work, offset, count): idx
                               for idx, (offset, count) in enumerate(chunks)}
            completed = 0
            for future in concurrent.futures.as_completed(future_to_index):
                idx = future_to_index[future]
                results[idx] = future.result()
                completed += 1
                if len(chunks) > 5:
                    logger.info(f"Monte Carlo progress: {completed}/{len(chunks)} chunks completed")
    logger.debug(f"Monte Carlo - {mc.n_paths} paths in {len(chunks)} chunks, "
                 f"{workers} workers, {time.time() - start_time:.2f}s")
    return results


def _merge(results: List[ChunkResult], name: str) -> Tuple[LogMeanAccumulator, int, int]:
    acc = LogMeanAccumulator()
    n_paths = n_diverged = 0
    for res in results:
        acc = acc.merge(LogMeanAccumulator.from_log_weights(res.log_weights[name]))
        n_paths += res.n_paths
        n_diverged += res.n_diverged
    return acc, n_paths, n_diverged


def _criterion(acc: LogMeanAccumulator, params: RiskSensitiveParams, n_paths: int,
               n_diverged: int, measure_tag: str, filtration_tag: str) -> CriterionEstimate:
    if acc.count == 0:
        raise EstimationError("every path diverged, no estimate available",
                              n_paths=n_paths, n_diverged=n_diverged)
    log_I = acc.log_mean
    rel = acc.relative_stderr
    I_value = float(np.exp(log_I))
    return CriterionEstimate(
        J_value=-log_I / params.theta, I_value=I_value, stderr_I=I_value * rel,
        n_paths=n_paths, n_diverged=n_diverged, measure_tag=measure_tag,
        filtration_tag=filtration_tag, stderr_J=rel / abs(params.theta), log_I=log_I,
        theta=params.theta,
    )


def _settings(n_paths: int, seed: int, antithetic: bool,
              mc: Optional[MonteCarloSettings]) -> MonteCarloSettings:
    return mc if mc is not None else MonteCarloSettings.from_env(n_paths, seed, antithetic)


def _monte_carlo(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                 grid: TimeGrid, mc: MonteCarloSettings, measure: str,
                 filter_kind: Optional[str], need_filter: bool,
                 quantities: QuantityFn) -> List[ChunkResult]:
    if filter_kind is None and (need_filter or strategy.is_feedback):
        filter_kind = default_filter_kind(spec)

    def work(offset: int, count: int) -> ChunkResult:
        return _simulate_chunk(spec, strategy, params, grid, mc, measure, filter_kind,
                               need_filter, quantities, offset, count)

    return run_chunks(work, mc)


def _log_r0(params: RiskSensitiveParams) -> float:
    return float(np.log(params.r0))


def _return_log_weight(R_T: np.ndarray, params: RiskSensitiveParams) -> np.ndarray:
    return -params.theta * (_log_r0(params) + np.asarray(R_T, dtype=float))


def criterion_from_returns(R_T: np.ndarray, params: RiskSensitiveParams, *,
                           measure_tag: str = "P",
                           filtration_tag: str = "original") -> CriterionEstimate:
    """Criterion from terminal log excess returns already sampled under P.

    Non-finite entries count as diverged paths.

    Raises:
        EstimationError: If no entry is finite.
    """
    R_T = np.asarray(R_T, dtype=float).ravel()
    finite = np.isfinite(R_T)
    acc = LogMeanAccumulator.from_log_weights(_return_log_weight(R_T[finite], params))
    return _criterion(acc, params, int(R_T.size), int(np.sum(~finite)), measure_tag, filtration_tag)


def estimate_J_original(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                        grid: TimeGrid, seed: int = 0, n_paths: int = 10000, *,
                        antithetic: bool = False, filter_kind: Optional[str] = None,
                        mc: Optional[MonteCarloSettings] = None) -> CriterionEstimate:
    """J = -(1/theta) ln( r0^{-theta} E[e^{-theta R_T}] ) with R in the full filtration.

    Raises:
        EstimationError: If every path diverged.
    """
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        R = simulate_R_original(spec, strategy, theta, paths, params.r0, traj)
        return {"original": _return_log_weight(R[-1], params)}

    results = _monte_carlo(spec, strategy, params, grid, mc, "P", filter_kind, False, quantities)
    acc, n, nd = _merge(results, "original")
    return _criterion(acc, params, n, nd, "P", "original")


def estimate_J_separated(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                         filter_kind: Optional[str], grid: TimeGrid, seed: int = 0,
                         n_paths: int = 10000, *, antithetic: bool = False,
                         mc: Optional[MonteCarloSettings] = None) -> CriterionEstimate:
    """J_hat from R rebuilt from the observation path and the filter."""
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        R = simulate_R_separated(spec, strategy, theta, traj, paths, params.r0)
        return {"separated": _return_log_weight(R[-1], params)}

    results = _monte_carlo(spec, strategy, params, grid, mc, "P", filter_kind, True, quantities)
    acc, n, nd = _merge(results, "separated")
    return _criterion(acc, params, n, nd, "P", "separated")


def estimate_J_h(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                 grid: TimeGrid, seed: int = 0, n_paths: int = 10000, *,
                 antithetic: bool = False, filter_kind: Optional[str] = None,
                 mc: Optional[MonteCarloSettings] = None) -> CriterionEstimate:
    """J^h = -(1/theta) ln E^h[ r0^{-theta} exp(theta int g dt) ] on paths simulated under Ph."""
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"g_form": -theta * _log_r0(params) + theta * ledger.int_g}

    results = _monte_carlo(spec, strategy, params, grid, mc, "Ph", filter_kind, False, quantities)
    acc, n, nd = _merge(results, "g_form")
    return _criterion(acc, params, n, nd, "Ph", "original")


def estimate_J_chi_weighted(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                            grid: TimeGrid, seed: int = 0, n_paths: int = 10000, *,
                            antithetic: bool = False, filter_kind: Optional[str] = None,
                            mc: Optional[MonteCarloSettings] = None) -> CriterionEstimate:
    """The J^h expectation computed under P with the chi weight."""
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"g_form_chi": -theta * _log_r0(params) + theta * ledger.int_g + ledger.log_chi}

    results = _monte_carlo(spec, strategy, params, grid, mc, "P", filter_kind, False, quantities)
    acc, n, nd = _merge(results, "g_form_chi")
    return _criterion(acc, params, n, nd, "P", "original")


def estimate_J_bar(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                   filter_kind: Optional[str], grid: TimeGrid, seed: int = 0,
                   n_paths: int = 10000, *, antithetic: bool = False,
                   mc: Optional[MonteCarloSettings] = None) -> CriterionEstimate:
    """I_bar = r0^{-theta} E_bar[ exp(theta int g_hat dt) Psi^Z_T ] on reference-measure paths."""
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"i_bar": -theta * _log_r0(params) + theta * ledger.int_g_hat + ledger.log_psi_z}

    results = _monte_carlo(spec, strategy, params, grid, mc, "Pbar", filter_kind, True, quantities)
    acc, n, nd = _merge(results, "i_bar")
    return _criterion(acc, params, n, nd, "Pbar", "separated")


def _agreement(a: float, b: float, se_a: float, se_b: float) -> Dict[str, Any]:
    gap = a - b
    combined = float(np.hypot(se_a, se_b))
    ok = abs(gap) <= Z_TOLERANCE * combined + 1e-9 * max(1.0, abs(a))
    return {"gap": gap, "stderr_combined": combined, "status": "PASS" if ok else "FAIL"}


def equivalence_experiment(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                           filter_kind: Optional[str], grid: TimeGrid, seed: int = 0,
                           n_paths: int = 10000, *, antithetic: bool = False,
                           include_measures: bool = False,
                           mc: Optional[MonteCarloSettings] = None) -> Dict[str, Any]:
    """Compare J and J_hat on common random numbers.

    With ``include_measures`` the control-measure and reference-measure
    estimates are added, each shifted by ``g_form_offset``.
    """
    mc = _settings(n_paths, seed, antithetic, mc)
    theta = params.theta
    kind = filter_kind or default_filter_kind(spec)

    def quantities(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        R = simulate_R_original(spec, strategy, theta, paths, params.r0, traj)
        R_sep = simulate_R_separated(spec, strategy, theta, traj, paths, params.r0)
        base = -theta * _log_r0(params)
        return {"original": base - theta * R[-1], "separated": base - theta * R_sep[-1]}

    results = _monte_carlo(spec, strategy, params, grid, mc, "P", kind, True, quantities)
    acc, n, nd = _merge(results, "original")
    J = _criterion(acc, params, n, nd, "P", "original")
    acc, n, nd = _merge(results, "separated")
    J_hat = _criterion(acc, params, n, nd, "P", "separated")
    report: Dict[str, Any] = {"J": J.J_value, "J_hat": J_hat.J_value,
                              "stderr_J": J.stderr_J, "stderr_J_hat": J_hat.stderr_J,
                              "filter_kind": kind, "n_paths": n, "n_diverged": nd}
    report.update(_agreement(J.J_value, J_hat.J_value, J.stderr_J, J_hat.stderr_J))
    if include_measures:
        offset = g_form_offset(params)
        J_h = estimate_J_h(spec, strategy, params, grid, filter_kind=kind, mc=mc)
        J_bar = estimate_J_bar(spec, strategy, params, kind, grid, mc=mc)
        report["g_form_offset"] = offset
        report["J_h"] = J_h.J_value + offset
        report["J_bar"] = J_bar.J_value + offset
        report["J_h_check"] = _agreement(J.J_value, J_h.J_value + offset, J.stderr_J, J_h.stderr_J)
        report["J_bar_check"] = _agreement(J_hat.J_value, J_bar.J_value + offset,
                                           J_hat.stderr_J, J_bar.stderr_J)
    logger.info(f"Equivalence - J {J.J_value:.6g}, J_hat {J_hat.J_value:.6g}, "
                f"gap {report['gap']:.3g} ({report['status']})")
    return report


def _mean_check(acc: LogMeanAccumulator, measure: str) -> Dict[str, Any]:
    mean, stderr = acc.mean_and_stderr()
    ok = abs(mean - 1.0) <= Z_TOLERANCE * stderr + 1e-12
    return {"mean": mean, "stderr": stderr, "measure": measure, "n": acc.count,
            "status": "PASS" if ok else "FAIL"}


def martingale_battery(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                       filter_kind: Optional[str], grid: TimeGrid, seed: int = 0,
                       n_paths: int = 10000, *, antithetic: bool = False,
                       mc: Optional[MonteCarloSettings] = None) -> Dict[str, Any]:
    """Means of the exponential weights that must be martingales.

    chi and chi_hat under P; 1/Psi^Z under the separated control measure
    (computed under P with the chi_hat weight); Psi^Z under Pbar.
    """
    mc = _settings(n_paths, seed, antithetic, mc)
    kind = filter_kind or default_filter_kind(spec)

    def under_p(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"chi": ledger.log_chi, "chi_hat": ledger.log_chi_hat,
                "inv_psi_z": ledger.log_chi_hat - ledger.log_psi_z}

    def under_pbar(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"psi_z": ledger.log_psi_z}

    res_p = _monte_carlo(spec, strategy, params, grid, mc, "P", kind, True, under_p)
    res_bar = _monte_carlo(spec, strategy, params, grid, mc, "Pbar", kind, True, under_pbar)
    report: Dict[str, Any] = {"filter_kind": kind}
    for name in ("chi", "chi_hat", "inv_psi_z"):
        report[name] = _mean_check(_merge(res_p, name)[0], "P")
    report["psi_z"] = _mean_check(_merge(res_bar, "psi_z")[0], "Pbar")
    report["status"] = "PASS" if all(report[k]["status"] == "PASS"
                                     for k in ("chi", "chi_hat", "inv_psi_z", "psi_z")) else "FAIL"
    return report


def kazamaki_statistics(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                        grid: TimeGrid, seed: int = 0, n_paths: int = 10000, *,
                        filter_kind: Optional[str] = None, antithetic: bool = False,
                        mc: Optional[MonteCarloSettings] = None) -> Dict[str, Any]:
    """Monte-Carlo Kazamaki expectations with tail diagnostics.

    X-form and Z-form of each condition are compared. The first pair is
    equal in law; the second pair is sampled under different measures, so
    its gap is informational and finiteness is the check that matters.
    """
    mc = _settings(n_paths, seed, antithetic, mc)
    kind = filter_kind or default_filter_kind(spec)

    def under_p(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"X1": ledger.kaz_x1, "Z1": ledger.kaz_z1,
                "Z2": ledger.log_chi_hat + ledger.kaz_z2}

    def under_ph(paths: PathBundle, traj: Any, ledger: LogWeightLedger) -> Dict[str, np.ndarray]:
        return {"X2": ledger.kaz_x2}

    res_p = _monte_carlo(spec, strategy, params, grid, mc, "P", kind, True, under_p)
    res_h = _monte_carlo(spec, strategy, params, grid, mc, "Ph", kind, False, under_ph)
    report: Dict[str, Any] = {"filter_kind": kind}
    heavy = False
    for name, results, measure in (("X1", res_p, "P"), ("Z1", res_p, "P"),
                                   ("X2", res_h, "Ph"), ("Z2", res_p, "P")):
        acc = _merge(results, name)[0]
        logs = np.concatenate([r.log_weights[name] for r in results])
        tail = hill_tail_index(logs)
        value, stderr = acc.mean_and_stderr()
        report[name] = {"value": value, "stderr": stderr, "log_value": acc.log_mean,
                        "measure": measure, "tail_index": tail,
                        "finite": bool(np.isfinite(value)),
                        "heavy_tail": bool(tail < HEAVY_TAIL_INDEX)}
        heavy |= tail < HEAVY_TAIL_INDEX
    report["form1"] = _agreement(report["X1"]["value"], report["Z1"]["value"],
                                 report["X1"]["stderr"], report["Z1"]["stderr"])
    report["form2"] = _agreement(report["X2"]["value"], report["Z2"]["value"],
                                 report["X2"]["stderr"], report["Z2"]["stderr"])
    report["form2"]["informational"] = True
    report["heavy_tail"] = bool(heavy)
    if heavy:
        logger.warning("Kazamaki - heavy-tailed log-weights, finiteness not supported by the sample")
    return report


PHI_FUNCTIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda x: np.ones(x.shape[:-1]),
    "x": lambda x: x[..., 0],
}


def _phi(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name not in PHI_FUNCTIONS:
        raise ValidationError(f"unknown test function '{name}'", allowed=sorted(PHI_FUNCTIONS))
    return PHI_FUNCTIONS[name]


def _weighted_ratio(log_w: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    """Self-normalized sum(w f) / sum(w) with its delta-method stderr."""
    w = np.exp(log_w - np.max(log_w))
    den = float(np.sum(w))
    ratio = float(np.sum(w * values)) / den
    stderr = float(np.sqrt(np.sum(w * w * (values - ratio) ** 2))) / den
    return ratio, stderr


def _scaled_ratio(log_w: np.ndarray, exponent: np.ndarray,
                  phi_values: np.ndarray) -> Tuple[float, float]:
    """Self-normalized mean of phi e^{exponent} under weights e^{log_w}."""
    top = float(np.max(exponent))
    ratio, stderr = _weighted_ratio(log_w, np.exp(exponent - top) * phi_values)
    scale = float(np.exp(top))
    return ratio * scale, stderr * scale


def kallianpur_striebel_check(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                              phi: str, grid: TimeGrid, seed: int = 0, n_clusters: int = 50,
                              cluster_size: int = 200, *, n_particles: int = 1000,
                              filter_kind: Optional[str] = None,
                              workers: Optional[int] = None) -> Dict[str, Any]:
    """Cluster-wise check of E^h[phi e^{theta int g} | Y] = E_bar[. Psi^X | Y] / E_bar[Psi^X | Y].

    Paths in one cluster share their observation path under Pbar, so the
    right-hand side is an exact cluster average. The left-hand side is an
    independent particle filter for the Ph dynamics on that observation path
    carrying int g per particle.
    """
    phi_fn = _phi(phi)
    theta = params.theta
    kind = filter_kind or default_filter_kind(spec)
    mc = MonteCarloSettings.from_env(n_clusters * cluster_size, seed, workers=workers)

    def work(offset: int, count: int) -> ChunkResult:
        paths = simulate_joint(spec, grid, seed, count, measure="Pbar", strategy=strategy,
                               theta=theta, path_offset=offset,
                               filter_kind=kind if strategy.is_feedback else None,
                               cluster_size=cluster_size)
        ledger = build_ledger(spec, strategy, theta, paths)
        h_path = strategy_path(strategy, grid, paths.n_paths, paths.filter_trajectory)
        rows = []
        for c in np.unique(paths.cluster_ids):
            members = np.flatnonzero((paths.cluster_ids == c) & ~paths.diverged)
            if members.size < MIN_CLUSTER_SIZE:
                rows.append({"cluster": int(c), "skipped": True})
                continue
            rhs, rhs_se = _scaled_ratio(ledger.log_psi_x[members], theta * ledger.int_g[members],
                                        phi_fn(paths.X_path[-1, members]))
            lhs, lhs_se = _particle_side(spec, strategy, params, paths, members[0], h_path,
                                         phi_fn, n_particles, seed, int(c))
            combined = float(np.hypot(lhs_se, rhs_se))
            gap = lhs - rhs
            rows.append({"cluster": int(c), "skipped": False, "lhs": lhs, "rhs": rhs,
                         "stderr": combined, "gap": gap,
                         "within": bool(abs(gap) <= Z_TOLERANCE * combined + 1e-12)})
        return ChunkResult(offset=offset, n_paths=count, n_diverged=int(np.sum(paths.diverged)),
                           extras={"clusters": rows})

    results = run_chunks(work, mc, align=cluster_size)
    rows = [row for res in results for row in res.extras["clusters"]]
    used = [r for r in rows if not r["skipped"]]
    if not used:
        raise EstimationError("no cluster had enough surviving paths", n_clusters=n_clusters)
    within = sum(r["within"] for r in used)
    rel = [abs(r["gap"]) / max(abs(r["rhs"]), 1e-300) for r in used]
    fraction = within / len(used)
    report = {
        "phi": phi, "n_clusters": n_clusters, "cluster_size": cluster_size,
        "n_skipped": len(rows) - len(used), "n_within": within, "fraction_within": fraction,
        "max_relative_discrepancy": float(max(rel)),
        "max_stderr": float(max(r["stderr"] for r in used)),
        "status": "PASS" if fraction >= KS_PASS_FRACTION else "FAIL",
        "clusters": rows,
    }
    logger.info(f"Kallianpur-Striebel - {within}/{len(used)} clusters within "
                f"{Z_TOLERANCE:g} stderr ({report['status']})")
    return report


def _particle_side(spec: ModelSpec, strategy: Strategy, params: RiskSensitiveParams,
                   paths: PathBundle, member: int, h_path: np.ndarray,
                   phi_fn: Callable[[np.ndarray], np.ndarray], n_particles: int,
                   seed: int, cluster: int) -> Tuple[float, float]:
    grid = paths.grid
    theta = params.theta
    h_obs = h_path[:, member: member + 1]

    def payload_rate(t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        j = int(round((t - grid.t0) / grid.dt))
        return g_integrand(spec, params, t, x, y, h_obs[j][:, None, :])

    runner = FilterRunner(spec, "particle", grid, np.array([cluster]), n_particles=n_particles,
                          seed=seed, payload_rate=payload_rate)
    Y = paths.Y_path[:, member: member + 1]
    shift = paths.shift[:, member: member + 1]
    for j in range(grid.steps):
        runner.step(j, grid.time(j), Y[j], Y[j + 1] - Y[j], grid.dt, shift[j])
    cloud: ParticleCloud = runner.state
    return _scaled_ratio(cloud.log_weights[0], theta * cloud.payload[0],
                         phi_fn(cloud.particles[0]))
