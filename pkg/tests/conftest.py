"""
Shared fixtures: presets, grids, strategies and Monte-Carlo settings.
"""

import logging

import numpy as np
import pytest

from sepfilter.core.criteria import MonteCarloSettings, RiskSensitiveParams
from sepfilter.core.sde_engine import Strategy, TimeGrid
from sepfilter.presets import build_preset


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def linear_spec():
    return build_preset("linear-gaussian")


@pytest.fixture
def wonham_spec():
    return build_preset("wonham-2state")


@pytest.fixture
def coarse_grid():
    return TimeGrid.from_dt(1.0, 2.0 ** -6)


@pytest.fixture
def half_strategy():
    return Strategy(kind="constant", h0=np.array([0.5]))


@pytest.fixture
def params():
    return RiskSensitiveParams(theta=0.5, T=1.0)


@pytest.fixture
def small_mc():
    return MonteCarloSettings(n_paths=400, seed=11, chunk_paths=128, workers=1)
