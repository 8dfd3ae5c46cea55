"""
Preset Registry
===============

Named model presets shipped as TOML files under ``presets/models``.

Classical presets (flagged ``classical``) reproduce the shapes of the
classical models the framework covers: wealth-based Nagai, continuous
Black-Litterman with experts, benchmarked Davis-Llèo with experts. The
remaining presets are the linear-Gaussian and Wonham workhorses, their
nonlinear variants and a general nonlinear demonstration. Numbers in the
files are placeholders; only the coefficient shapes are prescribed.
"""

import logging
from importlib import resources
from typing import Any, Dict, List

from sepfilter.core.errors import ValidationError
from sepfilter.core.model import ModelSpec, model_from_dict, validate

logger = logging.getLogger(__name__)

PRESET_PACKAGE = "sepfilter.presets"
PRESET_DIR = "models"


class PresetRegistry:
    """Lazy name -> TOML block registry; every built preset is validated."""

    def __init__(self) -> None:
        self._blocks: Dict[str, Dict[str, Any]] = {}
        self._loaded = False

    def _load(self) -> None:
        if self._loaded:
            return
        from sepfilter.core.scenario import parse_config_text

        folder = resources.files(PRESET_PACKAGE).joinpath(PRESET_DIR)
        for entry in sorted(folder.iterdir(), key=lambda p: p.name):
            if not entry.name.endswith(".toml"):
                continue
            block = parse_config_text(entry.read_text(encoding="utf-8"), "toml")
            name = str(block.get("name", entry.name[:-5]))
            self._blocks[name] = block
        self._loaded = True
        logger.debug(f"Presets - {len(self._blocks)} models registered")

    def names(self) -> List[str]:
        self._load()
        return sorted(self._blocks)

    def block(self, name: str) -> Dict[str, Any]:
        self._load()
        if name not in self._blocks:
            raise ValidationError(f"unknown preset '{name}'", available=self.names())
        return self._blocks[name]

    def build(self, name: str) -> ModelSpec:
        spec = model_from_dict(self.block(name), name=name)
        validate(spec).raise_if_failed(name)
        return spec

    def describe(self) -> List[Dict[str, Any]]:
        return [{"name": name, "description": self._blocks[name].get("description", ""),
                 "classical": bool(self._blocks[name].get("classical", False)),
                 "dims": self._blocks[name].get("dims", {})}
                for name in self.names()]


registry = PresetRegistry()


def build_preset(name: str) -> ModelSpec:
    """Build and validate a registered preset.

    Raises:
        ValidationError: Unknown name or a preset that fails validation.
    """
    return registry.build(name)


def list_presets() -> List[Dict[str, Any]]:
    return registry.describe()


__all__ = ["PresetRegistry", "build_preset", "list_presets", "registry"]
