#!/usr/bin/env python3
"""
SDE Engine
==========

Euler-Maruyama simulation of the hidden factor X and the observation Y on a
shared d-dimensional Wiener discretization, under

- P     : the model measure,
- Ph    : the control measure, drifts shifted by theta (Sigma1' h - Xi'),
- Pbar  : the reference measure under which dY = Sigma^Y dWbar,

plus the terminal log excess return R in the full and in the observation
filtration.

Arrays are time-major: X_path has shape (steps + 1, N, n), dW (steps, N, d).
Each path owns a Philox stream keyed by (seed, path index); draws are taken
in the order X0, increments, chain uniforms, so a path is reproduced
bit-for-bit no matter how paths are grouped into work units.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.integrate import solve_ivp

from sepfilter.core.errors import AlignmentError, ValidationError
from sepfilter.core.model import (
    ModelSpec,
    affine_parts,
    observation_affine_parts,
    observation_diffusion,
    observation_drift,
    observation_geometry,
    sigma1,
)
from sepfilter.core.utils import cluster_stream, path_stream, psd_sqrt

logger = logging.getLogger(__name__)

MEASURES = ("P", "Ph", "Pbar")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    dt: float
    steps: int

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.steps < 1:
            raise ValidationError("time grid needs dt > 0 and at least one step",
                                  dt=self.dt, steps=self.steps)
        if abs(self.steps * self.dt - (self.T - self.t0)) > 1e-9 * max(1.0, abs(self.T)):
            raise ValidationError("steps * dt must equal T - t0", steps=self.steps,
                                  dt=self.dt, T=self.T, t0=self.t0)

    @classmethod
    def from_dt(cls, T: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        steps = int(round((T - t0) / dt))
        return cls(t0=t0, T=T, dt=(T - t0) / max(steps, 1), steps=max(steps, 1))

    @classmethod
    def from_steps(cls, T: float, steps: int, t0: float = 0.0) -> "TimeGrid":
        return cls(t0=t0, T=T, dt=(T - t0) / steps, steps=steps)

    def time(self, j: int) -> float:
        return self.t0 + j * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def to_dict(self) -> Dict[str, float]:
        return {"t0": self.t0, "T": self.T, "dt": self.dt, "steps": self.steps}


@dataclass(frozen=True, eq=False)
class Strategy:
    """Investment strategy h, F^Y-adapted: depends on (t, filter mean) only.

    kinds:
        constant      h = h0
        mean_feedback h = h0 + gain @ m_t   (m_t the filter mean)
    """

    kind: str
    h0: np.ndarray
    gain: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "mean_feedback"):
            raise ValidationError(f"unknown strategy kind '{self.kind}'")
        if self.kind == "mean_feedback" and self.gain is None:
            raise ValidationError("mean_feedback strategy needs a gain matrix")

    @property
    def is_feedback(self) -> bool:
        return self.kind == "mean_feedback"

    @property
    def m1(self) -> int:
        return int(self.h0.size)

    def evaluate(self, t: float, mean: Optional[np.ndarray] = None,
                 batch: Tuple[int, ...] = ()) -> np.ndarray:
        if not self.is_feedback:
            return np.broadcast_to(self.h0, batch + (self.m1,))
        if mean is None:
            raise ValidationError("feedback strategy evaluated without a filter state")
        return self.h0 + np.asarray(mean) @ self.gain.T

    @classmethod
    def from_dict(cls, block: Dict[str, Any], m1: int, n: int) -> "Strategy":
        kind = str(block.get("kind", "constant"))
        h0 = np.asarray(block.get("values", block.get("h0", np.zeros(m1))), dtype=float).reshape(-1)
        if h0.size == 1 and m1 > 1:
            h0 = np.full(m1, float(h0[0]))
        if h0.size != m1:
            raise ValidationError(f"strategy needs {m1} entries", got=int(h0.size))
        gain = block.get("gain")
        if gain is not None:
            gain = np.asarray(gain, dtype=float).reshape(m1, n)
        return cls(kind=kind, h0=h0, gain=gain)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind, "h0": self.h0.tolist()}
        if self.gain is not None:
            out["gain"] = self.gain.tolist()
        return out


@dataclass
class PathBundle:
    """Batch of Monte-Carlo paths on one grid (leading time axis, then path axis)."""

    grid: TimeGrid
    X_path: np.ndarray
    Y_path: np.ndarray
    dW: np.ndarray
    path_ids: np.ndarray
    seed: int
    measure_tag: str
    diverged: np.ndarray
    shift: Optional[np.ndarray] = None
    state_index: Optional[np.ndarray] = None
    filter_trajectory: Any = None
    R_path: Optional[np.ndarray] = None
    cluster_ids: Optional[np.ndarray] = None
    theta: Optional[float] = None

    @property
    def n_paths(self) -> int:
        return int(self.path_ids.size)

    def __len__(self) -> int:
        return self.n_paths

    @property
    def dY(self) -> np.ndarray:
        return np.diff(self.Y_path, axis=0)

    def path(self, i: int) -> "PathBundle":
        """Single-path view (path axis kept with length 1)."""
        return self._select(slice(i, i + 1))

    def head(self, count: int) -> "PathBundle":
        return self._select(slice(0, min(count, self.n_paths)))

    def _select(self, sl: slice) -> "PathBundle":
        return replace(
            self,
            X_path=self.X_path[:, sl], Y_path=self.Y_path[:, sl], dW=self.dW[:, sl],
            path_ids=self.path_ids[sl], diverged=self.diverged[sl],
            shift=None if self.shift is None else self.shift[:, sl],
            state_index=None if self.state_index is None else self.state_index[:, sl],
            R_path=None if self.R_path is None else self.R_path[:, sl],
            cluster_ids=None if self.cluster_ids is None else self.cluster_ids[sl],
            filter_trajectory=None,
        )


def shift_from_control(spec: ModelSpec, t: float, y: np.ndarray, h: np.ndarray,
                       theta: float) -> np.ndarray:
    """theta (Sigma1' h - Xi') as a d-vector (batched over h and y)."""
    S1 = sigma1(spec, t, y)
    xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
    return theta * (np.einsum("...i,...id->...d", h, S1) - xi)


def drift_shift_h(spec: ModelSpec, strategy: Strategy, t: float, y: np.ndarray,
                  theta: float, filter_mean: Optional[np.ndarray] = None) -> np.ndarray:
    """Drift shift turning W into W^h; simulation under Ph subtracts it from drifts."""
    y = np.asarray(y, dtype=float)
    h = strategy.evaluate(t, filter_mean, y.shape[:-1])
    return shift_from_control(spec, t, y, h, theta)


def excess_return_increment(h: np.ndarray, S1: np.ndarray, xi: np.ndarray, a1: np.ndarray,
                            c: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """One Euler step of R with drift -1/2 |h'S1|^2 + h'a1 + 1/2 |Xi|^2 - c."""
    hS = np.einsum("...i,...id->...d", h, S1)
    drift = (-0.5 * np.sum(hS * hS, axis=-1) + np.sum(h * a1, axis=-1)
             + 0.5 * np.sum(xi * xi, axis=-1) - c)
    return drift * dt + np.sum((hS - xi) * dw, axis=-1)


def _sigma_y(spec: ModelSpec, t: float, y: np.ndarray) -> np.ndarray:
    return observation_diffusion(spec, t, y if spec.diffusion_depends_on_y else spec.y0)


def _draw_block(spec: ModelSpec, grid: TimeGrid, seed: int, path_ids: np.ndarray,
                antithetic: bool) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Per-path draws: X0 block, (steps, d) normals, chain uniforms."""
    n, d, steps = spec.dims.n, spec.dims.d, grid.steps
    B = path_ids.size
    chain = spec.is_chain
    x0_draw = np.empty((B, 1 if chain else n))
    normals = np.empty((steps, B, d))
    uniforms = np.empty((steps, B)) if chain else None
    for col, pid in enumerate(path_ids):
        stream, sign = (int(pid) // 2, -1.0 if int(pid) % 2 else 1.0) if antithetic else (int(pid), 1.0)
        rng = path_stream(seed, stream)
        x0_draw[col] = rng.random(1) if chain else sign * rng.standard_normal(n)
        normals[:, col, :] = sign * rng.standard_normal((steps, d))
        if chain:
            uniforms[:, col] = rng.random(steps)
    return x0_draw, normals, uniforms


def _initial_state(spec: ModelSpec, x0_draw: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    law = spec.x0_law
    if spec.is_chain:
        cum = np.cumsum(law.probs)
        idx = np.minimum(np.searchsorted(cum, x0_draw[:, 0], side="right"), cum.size - 1)
        return law.states[idx].astype(float), idx
    root = psd_sqrt(law.cov, name="P0")
    return law.mean + x0_draw @ root.T, None


def simulate_joint(spec: ModelSpec, grid: TimeGrid, seed: int, n_paths: int, *,
                   measure: str = "P", strategy: Optional[Strategy] = None,
                   theta: Optional[float] = None, path_offset: int = 0,
                   antithetic: bool = False, filter_kind: Optional[str] = None,
                   cluster_size: Optional[int] = None) -> PathBundle:
    """Simulate ``n_paths`` Euler-Maruyama paths of (X, Y).

    Args:
        spec: Validated model.
        grid: Time grid.
        seed: Root seed; path i uses the stream (seed, path_offset + i).
        n_paths: Number of paths in this batch.
        measure: ``P``, ``Ph`` or ``Pbar``. The last two need strategy and theta.
        strategy: Control used by the drift shift.
        theta: Risk sensitivity.
        path_offset: Global index of the first path.
        antithetic: Pair path 2j+1 with the negated Gaussian draws of path 2j.
        filter_kind: Run this filter online (required for feedback strategies
            under Ph/Pbar); the trajectory is attached to the bundle.
        cluster_size: Pbar only. Paths of one cluster share the component of
            the noise in the row space of Sigma^Y, hence share their Y path.

    Returns:
        PathBundle: Batch of paths; non-finite paths are flagged diverged and
        frozen at their last finite state.
    """
    if measure not in MEASURES:
        raise ValidationError(f"unknown measure '{measure}'", allowed=list(MEASURES))
    shifted = measure != "P"
    if shifted and (strategy is None or theta is None):
        raise ValidationError(f"simulation under {measure} needs a strategy and theta")
    if cluster_size is not None and measure != "Pbar":
        raise ValidationError("common-noise clusters are only defined under Pbar")
    if strategy is not None and strategy.is_feedback and filter_kind is None:
        from sepfilter.core.filters import default_filter_kind
        filter_kind = default_filter_kind(spec)

    dims = spec.dims
    dt, steps = grid.dt, grid.steps
    sqdt = np.sqrt(dt)
    path_ids = np.arange(path_offset, path_offset + n_paths)
    x0_draw, normals, uniforms = _draw_block(spec, grid, seed, path_ids, antithetic)
    x, state_idx = _initial_state(spec, x0_draw)
    y = np.broadcast_to(spec.y0, (n_paths, dims.mY)).astype(float)

    cluster_ids = None
    cluster_normals = None
    if cluster_size is not None:
        cluster_ids = path_ids // cluster_size
        unique = np.unique(cluster_ids)
        cluster_normals = {int(c): cluster_stream(seed, int(c)).standard_normal((steps, dims.d))
                           for c in unique}

    X = np.empty((steps + 1, n_paths, dims.n))
    Y = np.empty((steps + 1, n_paths, dims.mY))
    dW = np.empty((steps, n_paths, dims.d))
    shifts = np.empty((steps, n_paths, dims.d)) if shifted else None
    states = np.empty((steps + 1, n_paths), dtype=int) if spec.is_chain else None
    X[0], Y[0] = x, y
    if states is not None:
        states[0] = state_idx
    diverged = np.zeros(n_paths, dtype=bool)

    runner = None
    if filter_kind is not None:
        from sepfilter.core.filters import make_filter_runner
        runner = make_filter_runner(spec, filter_kind, grid, path_ids)

    transition = None
    if spec.is_chain:
        transition = np.cumsum(linalg.expm(spec.chain_generator * dt), axis=1)

    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(steps):
            t = grid.time(j)
            dw = sqdt * normals[j]
            aY = observation_drift(spec, t, x, y)
            SY = _sigma_y(spec, t, y)
            if cluster_ids is not None:
                geo = observation_geometry(spec, t, y)
                common = sqdt * np.stack([cluster_normals[int(c)][j] for c in cluster_ids])
                proj_common = geo.min_norm_noise(np.einsum("...id,...d->...i", geo.sigma_y, common))
                proj_own = geo.min_norm_noise(np.einsum("...id,...d->...i", geo.sigma_y, dw))
                dw = proj_common + (dw - proj_own)
            dW[j] = dw

            if not spec.is_chain:
                bx = spec.b.evaluate_flat(t, x, y)
                Lx = spec.Lambda.evaluate(t, x, y)
            if shifted:
                mean = runner.mean if runner is not None else None
                s = drift_shift_h(spec, strategy, t, y, theta, mean)
                shifts[j] = s
                if measure == "Ph":
                    aY = aY - np.einsum("...id,...d->...i", SY, s)
                    if not spec.is_chain:
                        bx = bx - np.einsum("...id,...d->...i", Lx, s)
                else:
                    a_dag = aY - np.einsum("...id,...d->...i", SY, s)
                    geo = observation_geometry(spec, t, y)
                    if not spec.is_chain:
                        v = geo.min_norm_noise(geo.restrict(a_dag))
                        bx = bx - np.einsum("...id,...d->...i", Lx, s + v)
                    aY = np.where(spec.active_rows, 0.0, a_dag)

            if spec.is_chain:
                cum = transition[state_idx]
                state_idx = np.minimum((uniforms[j][:, None] > cum).sum(axis=1), cum.shape[1] - 1)
                x_new = spec.x0_law.states[state_idx].astype(float)
                states[j + 1] = state_idx
            else:
                x_new = x + bx * dt + np.einsum("...id,...d->...i", Lx, dw)
            y_new = y + aY * dt + np.einsum("...id,...d->...i", SY, dw)

            bad = ~(np.all(np.isfinite(x_new), axis=-1) & np.all(np.isfinite(y_new), axis=-1))
            if np.any(bad & ~diverged):
                logger.warning(f"Simulation - {int(np.sum(bad & ~diverged))} paths diverged at step {j}")
            diverged |= bad
            x_new[diverged] = x[diverged]
            y_new[diverged] = y[diverged]
            if runner is not None:
                runner.step(j, t, y, y_new - y, dt)
            x, y = x_new, y_new
            X[j + 1], Y[j + 1] = x, y

    return PathBundle(
        grid=grid, X_path=X, Y_path=Y, dW=dW, path_ids=path_ids, seed=seed,
        measure_tag=measure, diverged=diverged, shift=shifts, state_index=states,
        filter_trajectory=runner.trajectory() if runner is not None else None,
        cluster_ids=cluster_ids, theta=theta,
    )


def strategy_path(strategy: Strategy, grid: TimeGrid, n_paths: int,
                  filter_trajectory: Any = None) -> np.ndarray:
    """h_t on the grid, shape (steps + 1, N, m1)."""
    if not strategy.is_feedback:
        return np.broadcast_to(strategy.h0, (grid.steps + 1, n_paths, strategy.m1))
    if filter_trajectory is None:
        raise ValidationError("feedback strategy needs a filter trajectory")
    return strategy.h0 + filter_trajectory.means @ strategy.gain.T


def _true_increments(paths: PathBundle) -> np.ndarray:
    if paths.measure_tag == "P":
        return paths.dW
    if paths.measure_tag == "Ph":
        return paths.dW - paths.shift * paths.grid.dt
    raise ValidationError("the full-filtration return is not defined on Pbar paths")


def simulate_R_original(spec: ModelSpec, strategy: Strategy, theta: float, paths: PathBundle,
                        r0: float = 1.0, filter_trajectory: Any = None) -> np.ndarray:
    """Log excess return R in the full filtration, shape (steps + 1, N).

    Paths simulated under Ph are converted back to the P-increments through
    the recorded drift shift. Diverged paths are NaN.
    """
    grid = paths.grid
    traj = filter_trajectory if filter_trajectory is not None else paths.filter_trajectory
    h = strategy_path(strategy, grid, paths.n_paths, traj)
    dW = _true_increments(paths)
    m1 = spec.dims.m1
    R = np.empty((grid.steps + 1, paths.n_paths))
    R[0] = r0
    for j in range(grid.steps):
        t = grid.time(j)
        x, y = paths.X_path[j], paths.Y_path[j]
        S1 = sigma1(spec, t, y)
        xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
        a1 = spec.a.evaluate_flat(t, x, y)[..., :m1]
        c = spec.c.evaluate_flat(t, x, y)[..., 0]
        R[j + 1] = R[j] + excess_return_increment(h[j], S1, xi, a1, c, dW[j], grid.dt)
    R[:, paths.diverged] = np.nan
    return R


def check_alignment(filter_trajectory: Any, paths: PathBundle) -> None:
    if filter_trajectory.grid != paths.grid:
        raise AlignmentError("filter trajectory and paths use different time grids",
                             filter_grid=filter_trajectory.grid.to_dict(),
                             path_grid=paths.grid.to_dict())
    if not np.array_equal(filter_trajectory.path_ids, paths.path_ids):
        raise AlignmentError("filter trajectory and paths cover different path ids",
                             n_filter=int(filter_trajectory.path_ids.size), n_paths=paths.n_paths)


def simulate_R_separated(spec: ModelSpec, strategy: Strategy, theta: float,
                         filter_trajectory: Any, paths: PathBundle,
                         r0: float = 1.0) -> np.ndarray:
    """Log excess return in the observation filtration.

    a^(1) and c are replaced by their filter expectations and dW by the
    minimum-norm innovations increment dW~ = Sigma^Y' G^{-1} (dY - a^Y_hat dt),
    which is determined by the observed path alone.
    """
    check_alignment(filter_trajectory, paths)
    grid = paths.grid
    h = strategy_path(strategy, grid, paths.n_paths, filter_trajectory)
    dY = paths.dY
    R = np.empty((grid.steps + 1, paths.n_paths))
    R[0] = r0
    for j in range(grid.steps):
        t = grid.time(j)
        y = paths.Y_path[j]
        geo = observation_geometry(spec, t, y)
        residual = geo.restrict(dY[j] - filter_trajectory.aY_hat[j] * grid.dt)
        dw_tilde = geo.min_norm_noise(residual)
        S1 = sigma1(spec, t, y)
        xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
        R[j + 1] = R[j] + excess_return_increment(
            h[j], S1, xi, filter_trajectory.a1_hat[j], filter_trajectory.c_hat[j],
            dw_tilde, grid.dt)
    R[:, paths.diverged] = np.nan
    return R


def simulate_wealth_benchmark(spec: ModelSpec, strategy: Strategy, paths: PathBundle,
                              v0: float = 1.0, l0: float = 1.0,
                              filter_trajectory: Any = None) -> Tuple[np.ndarray, np.ndarray]:
    """Wealth V and benchmark L in level space (Euler), for the e^R L / V = 1 check."""
    if paths.measure_tag != "P":
        raise ValidationError("level-space wealth is simulated on P paths")
    grid = paths.grid
    traj = filter_trajectory if filter_trajectory is not None else paths.filter_trajectory
    h = strategy_path(strategy, grid, paths.n_paths, traj)
    m1 = spec.dims.m1
    V = np.empty((grid.steps + 1, paths.n_paths))
    L = np.empty_like(V)
    V[0], L[0] = v0, l0
    for j in range(grid.steps):
        t = grid.time(j)
        x, y, dw = paths.X_path[j], paths.Y_path[j], paths.dW[j]
        S1 = sigma1(spec, t, y)
        xi = spec.Xi.evaluate_flat(t, spec.x_reference, y)
        a1 = spec.a.evaluate_flat(t, x, y)[..., :m1]
        c = spec.c.evaluate_flat(t, x, y)[..., 0]
        asset_ret = a1 * grid.dt + np.einsum("...id,...d->...i", S1, dw)
        V[j + 1] = V[j] * (1.0 + np.sum(h[j] * asset_ret, axis=-1))
        L[j + 1] = L[j] * (1.0 + c * grid.dt + np.sum(xi * dw, axis=-1))
    return V, L


def moment_ode_oracle(spec: ModelSpec, grid: TimeGrid) -> Dict[str, np.ndarray]:
    """Exact mean and covariance of Z = (X, Y) for linear-Gaussian models.

    dZ = (alpha(t) + Acal Z) dt + Scal dW with Acal built from the x and y
    slopes of the affine families; integrated with solve_ivp.

    Returns:
        dict: ``times``, ``mean`` (steps + 1, n + mY), ``cov`` (steps + 1, q, q).
    """
    if spec.is_chain:
        raise ValidationError("moment oracle needs a Gaussian hidden factor")
    n, mY = spec.dims.n, spec.dims.mY
    q = n + mY
    zero_y = np.zeros(mY)
    basis = np.eye(mY)

    def blocks(t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        b0, B = affine_parts(spec.b, t, zero_y)
        a0, A = observation_affine_parts(spec, t, zero_y)
        by = affine_parts(spec.b, t, basis)[0] - b0
        ay = observation_affine_parts(spec, t, basis)[0] - a0
        alpha = np.concatenate([b0, a0])
        Acal = np.zeros((q, q))
        Acal[:n, :n], Acal[:n, n:] = B, by.T
        Acal[n:, :n], Acal[n:, n:] = A, ay.T
        Scal = np.concatenate([spec.Lambda.evaluate(t, spec.x_reference, zero_y),
                               observation_diffusion(spec, t, zero_y)], axis=0)
        return alpha, Acal, Scal

    def rhs(t: float, z: np.ndarray) -> np.ndarray:
        alpha, Acal, Scal = blocks(t)
        mu, C = z[:q], z[q:].reshape(q, q)
        dC = Acal @ C + C @ Acal.T + Scal @ Scal.T
        return np.concatenate([alpha + Acal @ mu, dC.reshape(-1)])

    C0 = np.zeros((q, q))
    C0[:n, :n] = spec.x0_law.cov
    z0 = np.concatenate([spec.x0_law.mean, spec.y0, C0.reshape(-1)])
    sol = solve_ivp(rhs, (grid.t0, grid.T), z0, t_eval=grid.times, rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise ValidationError(f"moment ODE failed: {sol.message}")
    mean = sol.y[:q].T
    cov = sol.y[q:].T.reshape(-1, q, q)
    return {"times": sol.t, "mean": mean, "cov": cov}


def paths_frame(paths: PathBundle, R: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Long-format frame: path_id, step, t, x_0.., y_0.., R, diverged."""
    steps1, N, n = paths.X_path.shape
    mY = paths.Y_path.shape[-1]
    step = np.repeat(np.arange(steps1), N)
    data: Dict[str, Any] = {
        "path_id": np.tile(paths.path_ids, steps1),
        "step": step,
        "t": paths.grid.t0 + paths.grid.dt * step,
    }
    for i in range(n):
        data[f"x_{i}"] = paths.X_path[:, :, i].reshape(-1)
    for i in range(mY):
        data[f"y_{i}"] = paths.Y_path[:, :, i].reshape(-1)
    data["R"] = (R if R is not None else np.full((steps1, N), np.nan)).reshape(-1)
    data["diverged"] = np.tile(paths.diverged, steps1)
    frame = pd.DataFrame(data)
    return frame.sort_values(["path_id", "step"], kind="mergesort").reset_index(drop=True)
