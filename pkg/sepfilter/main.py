#!/usr/bin/env python3
"""
sepfilter - Command-Line Front End
==================================

Scenario-driven experiments on risk-sensitive benchmarked investment under
partial observation.

SUBCOMMANDS:
- simulate     Monte-Carlo paths of (X, Y) and R            -> paths.csv
- filter       filter trajectories, oracle comparison       -> filter.csv, filter_report.json
- criterion    one criterion estimate                       -> criterion.json
- equivalence  J vs J_hat on common random numbers          -> equivalence.json
- martingale   martingale battery of the exponential weights-> martingale.json
- mze          density solver with Monte-Carlo cross-check  -> mze_summary.json, mze_density.csv
- classify     separability of the model coefficients       -> classify.json
- kazamaki     Kazamaki statistics with tail diagnostics    -> kazamaki.json
- ks-check     cluster-wise Kallianpur-Striebel check       -> ks_check.json
- validate     model validation report                       -> validation.json
- presets      list the preset registry (stdout)

EXIT CODES:
- 0 success, 2 validation failure, 3 numerical failure; failures also write
  error.json to the output directory and print it to stderr.

CONFIGURATION (environment or .env):
- SEPFILTER_THREADS            worker cap (default: CPU count)
- SEPFILTER_LOG_LEVEL          default INFO
- SEPFILTER_LOG_FILE           default sepfilter.log, empty disables
- SEPFILTER_CHUNK_PATHS        paths per work unit (default 2048)
- SEPFILTER_CPU_BUSY_THRESHOLD percent (default 85)

Artifacts depend only on (scenario, seed); timings go to audit.log.
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from sepfilter import __version__
from sepfilter.core import criteria, mze
from sepfilter.core.errors import EXIT_NUMERICAL, EXIT_OK, SepfilterError, get_error_payload
from sepfilter.core.filters import (
    filter_report,
    innovation_quadratic_variation,
    run_filter,
    trajectory_frame,
)
from sepfilter.core.model import validate
from sepfilter.core.moments import classify
from sepfilter.core.scenario import Scenario, load_scenario, prepare_outputs
from sepfilter.core.sde_engine import paths_frame, simulate_joint, simulate_R_original
from sepfilter.presets import list_presets

logger = logging.getLogger(__name__)
audit_logger = logging.getLogger("audit")

CRITERION_FORMS = ("original", "separated", "h", "chi", "bar")


def configure_logging(level: Optional[str] = None) -> None:
    """Console plus optional file logging, format '%(asctime)s - %(levelname)s - %(message)s'."""
    level_name = (level or os.getenv("SEPFILTER_LOG_LEVEL", "INFO")).upper()
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    log_file = os.getenv("SEPFILTER_LOG_FILE", "sepfilter.log")
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def configure_audit(out: Path) -> None:
    for handler in list(audit_logger.handlers):
        audit_logger.removeHandler(handler)
        handler.close()
    audit_handler = logging.FileHandler(out / "audit.log")
    audit_handler.setFormatter(logging.Formatter("%(asctime)s - AUDIT - %(message)s"))
    audit_logger.addHandler(audit_handler)
    audit_logger.setLevel(logging.INFO)
    audit_logger.propagate = False


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats as strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        return _clean(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Artifact written: {path}")


def write_csv(path: Path, frame: Any) -> None:
    frame.to_csv(path, index=False, float_format="%.12g")
    logger.info(f"Artifact written: {path} ({len(frame)} rows)")


def cmd_simulate(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    measure = args.measure
    paths = simulate_joint(sc.spec, sc.grid, sc.mc.seed, sc.mc.n_paths, measure=measure,
                           strategy=sc.strategy, theta=sc.params.theta,
                           antithetic=sc.mc.antithetic,
                           filter_kind=sc.filter_kind if sc.strategy.is_feedback else None)
    R = None
    if measure != "Pbar":
        R = simulate_R_original(sc.spec, sc.strategy, sc.params.theta, paths, sc.params.r0)
    write_csv(out / "paths.csv", paths_frame(paths, R))
    return {"n_paths": paths.n_paths, "n_diverged": int(np.sum(paths.diverged)), "measure": measure}


def cmd_filter(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    paths = simulate_joint(sc.spec, sc.grid, sc.mc.seed, sc.mc.n_paths,
                           antithetic=sc.mc.antithetic)
    traj = run_filter(sc.spec, sc.filter_kind, paths, n_particles=sc.filter.particles)
    report: Dict[str, Any] = {"filter_kind": traj.kind, "n_paths": paths.n_paths,
                              "innovations": innovation_quadratic_variation(sc.spec, traj, paths)}
    head = paths.head(sc.filter.dump_paths)
    head_traj = run_filter(sc.spec, sc.filter_kind, head, n_particles=sc.filter.particles)
    write_csv(out / "filter.csv", trajectory_frame(head_traj))
    if sc.filter.oracle and traj.kind != "particle":
        oracle = run_filter(sc.spec, "particle", head, n_particles=sc.filter.particles)
        report["oracle"] = filter_report(head_traj, oracle)
    write_json(out / "filter_report.json", report)
    return {"status": report["innovations"]["status"]}


def cmd_criterion(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    form = args.form
    common = dict(mc=sc.mc)
    if form == "original":
        est = criteria.estimate_J_original(sc.spec, sc.strategy, sc.params, sc.grid,
                                           filter_kind=sc.filter_kind, **common)
    elif form == "separated":
        est = criteria.estimate_J_separated(sc.spec, sc.strategy, sc.params, sc.filter_kind,
                                            sc.grid, **common)
    elif form == "h":
        est = criteria.estimate_J_h(sc.spec, sc.strategy, sc.params, sc.grid,
                                    filter_kind=sc.filter_kind, **common)
    elif form == "chi":
        est = criteria.estimate_J_chi_weighted(sc.spec, sc.strategy, sc.params, sc.grid,
                                               filter_kind=sc.filter_kind, **common)
    else:
        est = criteria.estimate_J_bar(sc.spec, sc.strategy, sc.params, sc.filter_kind,
                                      sc.grid, **common)
    payload = est.to_dict()
    payload["form"] = form
    if form in ("h", "chi", "bar"):
        payload["g_form_offset"] = criteria.g_form_offset(sc.params)
    write_json(out / "criterion.json", payload)
    return {"J": est.J_value, "stderr_J": est.stderr_J}


def cmd_equivalence(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    report = criteria.equivalence_experiment(sc.spec, sc.strategy, sc.params, sc.filter_kind,
                                             sc.grid, include_measures=args.measures, mc=sc.mc)
    write_json(out / "equivalence.json", report)
    return {"status": report["status"], "gap": report["gap"]}


def cmd_martingale(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    report = criteria.martingale_battery(sc.spec, sc.strategy, sc.params, sc.filter_kind,
                                         sc.grid, mc=sc.mc)
    write_json(out / "martingale.json", report)
    return {"status": report["status"]}


def cmd_mze(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    config = sc.mze
    solution = mze.solve_q(sc.spec, sc.strategy, sc.params, sc.filter_kind, config)
    fine_axes = [(lo, hi) for lo, hi, _ in solution.density.axes]
    coarse_config = mze.with_bounds(replace(config, n_cells=max(config.n_cells // 2, 11),
                                            snapshot_times=()), fine_axes)
    coarse = mze.solve_q(sc.spec, sc.strategy, sc.params, sc.filter_kind, coarse_config)
    # half-resolution solve bounds the grid bias
    bias_band = abs(solution.I_bar - coarse.I_bar)

    mc_est = criteria.estimate_J_bar(sc.spec, sc.strategy, sc.params, sc.filter_kind,
                                     sc.grid, mc=sc.mc)
    gap = solution.I_bar - mc_est.I_value
    ok = abs(gap) <= 3.0 * mc_est.stderr_I + bias_band
    summary = solution.to_dict()
    offset = criteria.g_form_offset(sc.params)
    summary.update({
        "g_form_offset": offset, "J_from_mze": solution.J_bar + offset,
        "mc": {"I_bar": mc_est.I_value, "stderr_I": mc_est.stderr_I, "J_bar": mc_est.J_value,
               "n_paths": mc_est.n_paths, "n_diverged": mc_est.n_diverged},
        "I_bar_half_grid": coarse.I_bar, "grid_bias_band": bias_band, "gap": gap,
        "status": "PASS" if ok else "FAIL",
    })
    write_json(out / "mze_summary.json", summary)
    write_csv(out / "mze_density.csv", mze.snapshot_frame(solution))
    return {"status": summary["status"], "qT1": solution.qT1}


def cmd_classify(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    report = classify(sc.spec).to_dict()
    write_json(out / "classify.json", report)
    return {"verdict": report["verdict"]}


def cmd_kazamaki(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    report = criteria.kazamaki_statistics(sc.spec, sc.strategy, sc.params, sc.grid,
                                          filter_kind=sc.filter_kind, mc=sc.mc)
    write_json(out / "kazamaki.json", report)
    return {"form1": report["form1"]["status"], "heavy_tail": report["heavy_tail"]}


def cmd_ks_check(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    ks = sc.ks
    report = criteria.kallianpur_striebel_check(
        sc.spec, sc.strategy, sc.params, ks.phi, sc.grid, seed=sc.mc.seed,
        n_clusters=ks.n_clusters, cluster_size=ks.cluster_size, n_particles=ks.n_particles,
        filter_kind=sc.filter_kind)
    write_json(out / "ks_check.json", report)
    return {"status": report["status"], "fraction_within": report["fraction_within"]}


def cmd_validate(sc: Scenario, out: Path, args: argparse.Namespace) -> Dict[str, Any]:
    report = validate(sc.spec)
    write_json(out / "validation.json", report.to_dict())
    return {"ok": report.ok}


COMMANDS: Dict[str, Callable[[Scenario, Path, argparse.Namespace], Dict[str, Any]]] = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "criterion": cmd_criterion,
    "equivalence": cmd_equivalence,
    "martingale": cmd_martingale,
    "mze": cmd_mze,
    "classify": cmd_classify,
    "kazamaki": cmd_kazamaki,
    "ks-check": cmd_ks_check,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepfilter",
        description="Risk-sensitive benchmarked investment under partial observation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="overrides SEPFILTER_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario file (JSON or TOML)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--theta", type=float, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "simulate":
            p.add_argument("--measure", choices=("P", "Ph", "Pbar"), default="P")
        if name == "criterion":
            p.add_argument("--form", choices=CRITERION_FORMS, default="original")
        if name == "equivalence":
            p.add_argument("--measures", action="store_true",
                           help="add the control- and reference-measure estimates")
    sub.add_parser("presets", help="list registered model presets")
    return parser


def _fail(exc: BaseException, command: str, out: Optional[Path]) -> int:
    payload = get_error_payload(exc, context=command)
    if out is not None and out.is_dir():
        write_json(out / "error.json", payload)
    print(json.dumps(_clean(payload), sort_keys=True), file=sys.stderr)
    return int(payload.get("exit_code", EXIT_NUMERICAL))


def run(command: str, args: argparse.Namespace) -> int:
    """Execute one subcommand; returns the exit code."""
    if command == "presets":
        print(json.dumps(_clean(list_presets()), indent=2, sort_keys=True))
        return EXIT_OK

    out: Optional[Path] = Path(args.out) if args.out else None
    start_time = time.time()
    try:
        overrides = {"seed": args.seed, "paths": args.paths, "dt": args.dt,
                     "theta": args.theta, "out": args.out}
        scenario = load_scenario(args.config, overrides)
        out = prepare_outputs(scenario)
        configure_audit(out)
        audit_logger.info(f"Command: {command} - Scenario: {scenario.name} - Model: "
                          f"{scenario.model_ref} - Seed: {scenario.mc.seed} - Paths: "
                          f"{scenario.mc.n_paths} - Started")
        write_json(out / "scenario.json", scenario.to_dict())
        result = COMMANDS[command](scenario, out, args)
        elapsed = time.time() - start_time
        audit_logger.info(f"Command: {command} - Scenario: {scenario.name} - Completed - "
                          f"Result: {_clean(result)} - Time: {elapsed:.2f}s")
        logger.info(f"{command} completed in {elapsed:.2f}s")
        return EXIT_OK
    except SepfilterError as e:
        logger.error(f"{command} failed: {e.message}")
        audit_logger.info(f"Command: {command} - FAILED - {e.category} - "
                          f"Time: {time.time() - start_time:.2f}s")
        return _fail(e, command, out)
    except Exception as e:
        logger.exception(f"{command} failed with an unexpected error: {e}")
        audit_logger.info(f"Command: {command} - FAILED - internal - "
                          f"Time: {time.time() - start_time:.2f}s")
        return _fail(e, command, out)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    return run(args.command, args)


if __name__ == "__main__":
    sys.exit(main())
