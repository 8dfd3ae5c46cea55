"""
Tests for path simulation and the excess-return recursions
"""

import numpy as np
import pytest

from sepfilter.core.errors import AlignmentError, ValidationError
from sepfilter.core.filters import run_filter
from sepfilter.core.sde_engine import (
    Strategy,
    TimeGrid,
    check_alignment,
    drift_shift_h,
    moment_ode_oracle,
    paths_frame,
    simulate_joint,
    simulate_R_original,
    simulate_R_separated,
    simulate_wealth_benchmark,
)
from tests.factories import deterministic_model, scalar_model

pytestmark = pytest.mark.unit


class TestTimeGrid:
    def test_from_dt_rounds_to_whole_steps(self):
        grid = TimeGrid.from_dt(1.0, 2.0 ** -9)
        assert grid.steps == 512
        assert grid.times[-1] == pytest.approx(1.0)

    def test_inconsistent_grid_is_rejected(self):
        with pytest.raises(ValidationError):
            TimeGrid(t0=0.0, T=1.0, dt=0.1, steps=3)

    def test_non_positive_step_is_rejected(self):
        with pytest.raises(ValidationError):
            TimeGrid(t0=0.0, T=1.0, dt=0.0, steps=1)


def test_paths_do_not_depend_on_chunking(linear_spec, coarse_grid):
    """Path i draws from stream (seed, i) whatever batch it is simulated in"""
    whole = simulate_joint(linear_spec, coarse_grid, 3, 6)
    tail = simulate_joint(linear_spec, coarse_grid, 3, 3, path_offset=3)
    np.testing.assert_array_equal(whole.X_path[:, 3:], tail.X_path)
    np.testing.assert_array_equal(whole.Y_path[:, 3:], tail.Y_path)
    np.testing.assert_array_equal(tail.path_ids, [3, 4, 5])


def test_antithetic_pairs_negate_the_noise(linear_spec, coarse_grid):
    paths = simulate_joint(linear_spec, coarse_grid, 0, 4, antithetic=True)
    np.testing.assert_allclose(paths.dW[:, 1], -paths.dW[:, 0])
    np.testing.assert_allclose(paths.X_path[0, 3] - 0.0, -(paths.X_path[0, 2] - 0.0))


def test_shapes_are_time_major(linear_spec, coarse_grid):
    paths = simulate_joint(linear_spec, coarse_grid, 1, 5)
    assert paths.X_path.shape == (coarse_grid.steps + 1, 5, 1)
    assert paths.Y_path.shape == (coarse_grid.steps + 1, 5, 2)
    assert paths.dW.shape == (coarse_grid.steps, 5, 3)
    assert paths.head(2).n_paths == 2
    assert paths.path(4).path_ids.tolist() == [4]


def test_sample_moments_match_the_moment_ode(linear_spec):
    grid = TimeGrid.from_dt(1.0, 2.0 ** -7)
    paths = simulate_joint(linear_spec, grid, 21, 4000)
    oracle = moment_ode_oracle(linear_spec, grid)
    z_T = np.concatenate([paths.X_path[-1], paths.Y_path[-1]], axis=-1)
    mean = z_T.mean(axis=0)
    stderr = z_T.std(axis=0, ddof=1) / np.sqrt(z_T.shape[0])
    # Euler bias on this grid is far below the Monte-Carlo error
    assert np.all(np.abs(mean - oracle["mean"][-1]) <= 4.0 * stderr + 2.0 * grid.dt)
    var = z_T.var(axis=0, ddof=1)
    np.testing.assert_allclose(var, np.diag(oracle["cov"][-1]), rtol=0.1)


def test_shifted_measures_need_strategy_and_theta(linear_spec, coarse_grid):
    with pytest.raises(ValidationError):
        simulate_joint(linear_spec, coarse_grid, 0, 2, measure="Ph")
    with pytest.raises(ValidationError):
        simulate_joint(linear_spec, coarse_grid, 0, 2, measure="Q")


def test_clusters_share_the_observation_path(linear_spec, coarse_grid, half_strategy):
    paths = simulate_joint(linear_spec, coarse_grid, 9, 10, measure="Pbar",
                           strategy=half_strategy, theta=0.5, cluster_size=5)
    np.testing.assert_array_equal(paths.cluster_ids, [0] * 5 + [1] * 5)
    np.testing.assert_allclose(paths.Y_path[:, 1:5], np.repeat(paths.Y_path[:, :1], 4, axis=1),
                               atol=1e-12)
    assert not np.allclose(paths.Y_path[:, 0], paths.Y_path[:, 5])
    assert not np.allclose(paths.X_path[:, 0], paths.X_path[:, 1])


def test_clusters_are_only_defined_under_pbar(linear_spec, coarse_grid):
    with pytest.raises(ValidationError):
        simulate_joint(linear_spec, coarse_grid, 0, 4, cluster_size=2)


def test_deterministic_return():
    """Without noise in R the excess return grows by (h a - c) per unit time"""
    spec = deterministic_model()
    grid = TimeGrid.from_dt(1.0, 2.0 ** -5)
    strategy = Strategy(kind="constant", h0=np.array([1.0]))
    paths = simulate_joint(spec, grid, 0, 3)
    R = simulate_R_original(spec, strategy, 0.5, paths, r0=1.0)
    np.testing.assert_allclose(R[-1], 1.02, atol=1e-12)


def test_ph_paths_recover_the_p_return(linear_spec, coarse_grid, half_strategy):
    """R on Ph paths uses dW = dW^h - shift dt, so the recursion stays well defined"""
    paths = simulate_joint(linear_spec, coarse_grid, 4, 50, measure="Ph",
                           strategy=half_strategy, theta=0.5)
    R = simulate_R_original(linear_spec, half_strategy, 0.5, paths)
    assert np.all(np.isfinite(R))


def test_separated_return_needs_aligned_filter(linear_spec, coarse_grid, half_strategy):
    paths = simulate_joint(linear_spec, coarse_grid, 2, 4)
    traj = run_filter(linear_spec, "KF", paths)
    R_sep = simulate_R_separated(linear_spec, half_strategy, 0.5, traj, paths)
    assert R_sep.shape == (coarse_grid.steps + 1, 4)
    other = simulate_joint(linear_spec, coarse_grid, 2, 4, path_offset=10)
    with pytest.raises(AlignmentError):
        check_alignment(traj, other)


def test_level_space_wealth_matches_log_return(linear_spec, half_strategy):
    """e^{R_T - r0} L_T / V_T stays close to one on a fine grid"""
    grid = TimeGrid.from_dt(1.0, 2.0 ** -10)
    paths = simulate_joint(linear_spec, grid, 8, 20)
    R = simulate_R_original(linear_spec, half_strategy, 0.5, paths, r0=1.0)
    V, L = simulate_wealth_benchmark(linear_spec, half_strategy, paths)
    ratio = np.exp(R[-1] - 1.0) * L[-1] / V[-1]
    assert np.median(np.abs(ratio - 1.0)) < 0.01


def test_paths_frame_layout(linear_spec, coarse_grid):
    paths = simulate_joint(linear_spec, coarse_grid, 0, 2)
    frame = paths_frame(paths)
    assert list(frame.columns) == ["path_id", "step", "t", "x_0", "y_0", "y_1", "R", "diverged"]
    assert len(frame) == 2 * (coarse_grid.steps + 1)
    assert frame["path_id"].is_monotonic_increasing


def test_drift_shift_is_theta_times_the_control_integrand(half_strategy):
    spec = scalar_model()
    y = np.tile(spec.y0, (3, 1))
    shift = drift_shift_h(spec, half_strategy, 0.0, y, theta=2.0)
    # h = 0.5: theta (h S1 - Xi) = 2 (0, 0.15, -0.1)
    np.testing.assert_allclose(shift, [[0.0, 0.3, -0.2]] * 3)


def test_feedback_shift_needs_a_filter_mean():
    spec = scalar_model()
    feedback = Strategy(kind="mean_feedback", h0=np.array([0.5]), gain=np.array([[1.0]]))
    with pytest.raises(ValidationError):
        drift_shift_h(spec, feedback, 0.0, spec.y0, theta=0.5)
    shift = drift_shift_h(spec, feedback, 0.0, spec.y0, theta=1.0, filter_mean=np.array([0.5]))
    np.testing.assert_allclose(shift, [0.0, 0.3, -0.1])


@pytest.mark.slow
def test_euler_mean_converges_at_order_one():
    spec = scalar_model(x0={"mean": [1.0], "cov": [[0.25]]})
    steps = [2.0 ** -k for k in range(4, 9)]
    errors = []
    for dt in steps:
        grid = TimeGrid.from_dt(1.0, dt)
        # antithetic pairs cancel the noise of linear dynamics, leaving the Euler mean
        paths = simulate_joint(spec, grid, 3, 8, antithetic=True)
        z_T = np.concatenate([paths.X_path[-1], paths.Y_path[-1]], axis=-1)
        exact = moment_ode_oracle(spec, grid)["mean"][-1]
        errors.append(float(np.max(np.abs(z_T.mean(axis=0) - exact))))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert 0.85 <= slope <= 1.15
