#!/usr/bin/env python3
"""
Scenario Files
==============

Parses a JSON or TOML scenario into the objects every subcommand needs:
model, strategy, risk-sensitivity parameters, time grid, Monte-Carlo
settings, filter kind and output directory, plus the optional ``mze``,
``ks`` and ``filter`` blocks.

``model`` is either a preset name or an inline model block. Command-line
overrides (seed, paths, dt, theta, out) are applied after parsing.
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from sepfilter.core.criteria import MonteCarloSettings, RiskSensitiveParams
from sepfilter.core.errors import ValidationError
from sepfilter.core.filters import DEFAULT_PARTICLES, default_filter_kind, normalize_kind
from sepfilter.core.model import ModelSpec, model_from_dict, validate
from sepfilter.core.mze import GridConfig
from sepfilter.core.sde_engine import Strategy, TimeGrid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DEFAULT_DT = 2.0 ** -9
DEFAULT_PATHS = 10000


def parse_config_text(text: str, fmt: str) -> Dict[str, Any]:
    """Parse scenario or preset text; ``fmt`` is ``json`` or ``toml``."""
    try:
        if fmt == "json":
            return json.loads(text)
        if fmt == "toml":
            return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ValidationError(f"cannot parse {fmt} configuration: {e}")
    raise ValidationError(f"unsupported configuration format '{fmt}'", allowed=["json", "toml"])


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"configuration file not found: {path}")
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    return parse_config_text(path.read_text(encoding="utf-8"), fmt)


@dataclass
class KSConfig:
    n_clusters: int = 100
    cluster_size: int = 1000
    phi: str = "one"
    n_particles: int = DEFAULT_PARTICLES

    @classmethod
    def from_dict(cls, block: Dict[str, Any]) -> "KSConfig":
        return cls(n_clusters=int(block.get("n_clusters", 100)),
                   cluster_size=int(block.get("cluster_size", 1000)),
                   phi=str(block.get("phi", "one")),
                   n_particles=int(block.get("particles", DEFAULT_PARTICLES)))


@dataclass
class FilterConfig:
    particles: int = DEFAULT_PARTICLES
    dump_paths: int = 10
    oracle: bool = True

    @classmethod
    def from_dict(cls, block: Dict[str, Any]) -> "FilterConfig":
        return cls(particles=int(block.get("particles", DEFAULT_PARTICLES)),
                   dump_paths=int(block.get("dump_paths", 10)),
                   oracle=bool(block.get("oracle", True)))


@dataclass
class Scenario:
    name: str
    spec: ModelSpec
    strategy: Strategy
    params: RiskSensitiveParams
    grid: TimeGrid
    mc: MonteCarloSettings
    filter_kind: str
    outputs: Path
    mze: GridConfig = field(default_factory=GridConfig)
    ks: KSConfig = field(default_factory=KSConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    model_ref: str = "inline"

    def to_dict(self) -> Dict[str, Any]:
        """Resolved scenario, echoed next to the artifacts."""
        return {
            "name": self.name, "model": self.model_ref, "strategy": self.strategy.to_dict(),
            "params": self.params.to_dict(), "grid": self.grid.to_dict(),
            "mc": {"n_paths": self.mc.n_paths, "seed": self.mc.seed,
                   "antithetic": self.mc.antithetic, "chunk_paths": self.mc.chunk_paths},
            "filter_kind": self.filter_kind,
        }


def _model(cfg: Dict[str, Any]) -> Tuple[ModelSpec, str]:
    from sepfilter.presets import build_preset

    block = cfg.get("model")
    if block is None:
        raise ValidationError("scenario needs a 'model' entry (preset name or inline block)")
    if isinstance(block, str):
        return build_preset(block), block
    if not isinstance(block, dict):
        raise ValidationError("'model' must be a preset name or a table")
    spec = model_from_dict(block)
    validate(spec).raise_if_failed(spec.name)
    return spec, "inline"


def build_scenario(cfg: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None,
                   name: str = "scenario") -> Scenario:
    """Turn a parsed scenario dictionary into a Scenario.

    Args:
        cfg: Parsed JSON/TOML content.
        overrides: Optional ``seed``, ``paths``, ``dt``, ``theta``, ``out``.
        name: Label used in logs and the echoed scenario.

    Raises:
        ValidationError: Missing or inconsistent blocks, unknown preset,
            invalid model.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    spec, model_ref = _model(cfg)
    dims = spec.dims

    strategy = Strategy.from_dict(cfg.get("strategy", {}), dims.m1, dims.n)
    params_block = dict(cfg.get("params", {}))
    if "theta" in overrides:
        params_block["theta"] = overrides["theta"]
    params = RiskSensitiveParams.from_dict(params_block, spec.horizon)

    grid_block = cfg.get("grid", {})
    t0 = float(grid_block.get("t0", 0.0))
    if "dt" in overrides:
        grid = TimeGrid.from_dt(params.T, float(overrides["dt"]), t0)
    elif "steps" in grid_block:
        grid = TimeGrid.from_steps(params.T, int(grid_block["steps"]), t0)
    else:
        grid = TimeGrid.from_dt(params.T, float(grid_block.get("dt", DEFAULT_DT)), t0)

    mc_block = cfg.get("mc", {})
    chunk = mc_block.get("chunk_paths", os.getenv("SEPFILTER_CHUNK_PATHS", "2048"))
    mc = MonteCarloSettings(
        n_paths=int(overrides.get("paths", mc_block.get("n_paths", DEFAULT_PATHS))),
        seed=int(overrides.get("seed", mc_block.get("seed", 0))),
        antithetic=bool(mc_block.get("antithetic", False)),
        chunk_paths=int(chunk),
    )

    kind = cfg.get("filter_kind")
    filter_kind = normalize_kind(kind) if kind else default_filter_kind(spec)

    mze_block = dict(cfg.get("mze", {}))
    mze_block.setdefault("seed", mc.seed)
    outputs = Path(overrides.get("out", cfg.get("outputs", "results")))
    scenario = Scenario(
        name=str(cfg.get("name", name)), spec=spec, strategy=strategy, params=params,
        grid=grid, mc=mc, filter_kind=filter_kind, outputs=outputs,
        mze=GridConfig.from_dict(mze_block), ks=KSConfig.from_dict(cfg.get("ks", {})),
        filter=FilterConfig.from_dict(cfg.get("filter", {})), model_ref=model_ref,
    )
    logger.info(f"Scenario - {scenario.name}: model {model_ref}, theta {params.theta}, "
                f"{grid.steps} steps, {mc.n_paths} paths, filter {filter_kind}")
    return scenario


def load_scenario(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    path = Path(path)
    return build_scenario(read_config_file(path), overrides, name=path.stem)


def prepare_outputs(scenario: Scenario) -> Path:
    """Create the output directory and check that it is writable."""
    out = scenario.outputs
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create output directory {out}: {e}")
    if not os.access(out, os.W_OK):
        raise ValidationError(f"output directory is not writable: {out}")
    return out
