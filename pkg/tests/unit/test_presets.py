"""
Tests for the preset registry
"""

import pytest

from sepfilter.core.errors import ValidationError
from sepfilter.core.model import validate
from sepfilter.presets import PresetRegistry, build_preset, list_presets, registry

pytestmark = pytest.mark.unit

EXPECTED = {
    "bl-continuous", "davis-lleo-2021", "general-nonlinear", "linear-gaussian",
    "linear-gaussian-quadratic-c", "linear-gaussian-tabulated-drift", "nagai2001", "wonham-2state",
}


def test_registry_lists_every_model():
    assert set(registry.names()) == EXPECTED
    described = {entry["name"]: entry for entry in list_presets()}
    assert {name for name, entry in described.items() if entry["classical"]} == {
        "nagai2001", "bl-continuous", "davis-lleo-2021"}


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_every_preset_validates(name):
    spec = build_preset(name)
    assert spec.name == name
    assert validate(spec).ok


def test_wealth_based_preset_has_no_benchmark_or_experts():
    dims = build_preset("nagai2001").dims
    assert (dims.ell, dims.k, dims.m) == (0, 0, 2)


def test_benchmarked_preset_carries_experts():
    dims = build_preset("davis-lleo-2021").dims
    assert dims.ell == 1 and dims.k == 1


def test_unknown_preset_lists_the_alternatives():
    with pytest.raises(ValidationError) as info:
        PresetRegistry().build("no-such-model")
    assert "linear-gaussian" in info.value.details["available"]
