"""
End-to-end runs of the sepfilter command line on small scenarios
"""

import json
from pathlib import Path

import pandas as pd
import pytest

from sepfilter import __version__
from sepfilter.core.scenario import load_scenario
from sepfilter.main import main

pytestmark = pytest.mark.integration

SCENARIOS = Path(__file__).resolve().parents[2] / "scenarios"

SMALL = """
name = "small"
model = "{model}"

[strategy]
kind = "constant"
values = [0.5]

[params]
theta = 0.5

[grid]
dt = 0.03125

[mc]
n_paths = 200
seed = 9
chunk_paths = 100

[filter]
particles = 500
dump_paths = 2

[mze]
n_cells = 61
dt = 0.015625
scheme = "{scheme}"
domain_paths = 300

[ks]
n_clusters = 3
cluster_size = 20
particles = 200
"""


@pytest.fixture(autouse=True)
def cli_env(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("SEPFILTER_LOG_FILE", "")
    monkeypatch.setenv("SEPFILTER_THREADS", "1")


def _scenario(tmp_path, model="linear-gaussian", scheme="crank-nicolson"):
    path = tmp_path / f"{model}.toml"
    path.write_text(SMALL.format(model=model, scheme=scheme))
    return str(path)


def _run(command, config, out, *extra):
    return main([command, "--config", config, "--out", str(out), *extra])


def _read(path):
    return json.loads(path.read_text())


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    names = {entry["name"] for entry in json.loads(capsys.readouterr().out)}
    assert {"linear-gaussian", "wonham-2state", "nagai2001"} <= names


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_scenarios_parse(path):
    sc = load_scenario(path)
    assert sc.mc.n_paths >= 1000
    assert sc.outputs.parts[0] == "results"


def test_classify_and_validate(tmp_path):
    out = tmp_path / "out"
    config = _scenario(tmp_path)
    assert _run("classify", config, out) == 0
    assert _read(out / "classify.json")["verdict"] == "strict"
    assert _run("validate", config, out) == 0
    assert _read(out / "validation.json")["ok"] is True
    assert _read(out / "scenario.json")["model"] == "linear-gaussian"
    audit = (out / "audit.log").read_text()
    assert "AUDIT" in audit and "Completed" in audit


def test_simulate_writes_paths(tmp_path):
    out = tmp_path / "out"
    assert _run("simulate", _scenario(tmp_path), out, "--paths", "3", "--measure", "Ph") == 0
    frame = pd.read_csv(out / "paths.csv")
    assert frame["path_id"].nunique() == 3
    assert len(frame) == 3 * 33
    assert {"x_0", "y_0", "y_1", "R", "diverged"} <= set(frame.columns)


def test_filter_report(tmp_path):
    out = tmp_path / "out"
    assert _run("filter", _scenario(tmp_path), out, "--paths", "20") == 0
    report = _read(out / "filter_report.json")
    assert report["filter_kind"] == "KF" and report["n_paths"] == 20
    assert report["oracle"]["oracle_kind"] == "particle"
    frame = pd.read_csv(out / "filter.csv")
    assert frame["path_id"].nunique() == 2


@pytest.mark.parametrize("form", ["original", "separated", "h", "chi", "bar"])
def test_criterion_forms(tmp_path, form):
    out = tmp_path / form
    assert _run("criterion", _scenario(tmp_path), out, "--form", form) == 0
    payload = _read(out / "criterion.json")
    assert payload["form"] == form and payload["n_paths"] == 200
    assert ("g_form_offset" in payload) == (form in ("h", "chi", "bar"))


def test_equivalence_with_measures(tmp_path):
    out = tmp_path / "out"
    assert _run("equivalence", _scenario(tmp_path), out, "--measures") == 0
    report = _read(out / "equivalence.json")
    assert {"J", "J_hat", "J_h", "J_bar", "J_h_check", "J_bar_check", "status"} <= set(report)


def test_martingale_kazamaki_and_ks(tmp_path):
    out = tmp_path / "out"
    config = _scenario(tmp_path)
    assert _run("martingale", config, out) == 0
    assert set(_read(out / "martingale.json")) >= {"chi", "chi_hat", "inv_psi_z", "psi_z"}
    assert _run("kazamaki", config, out) == 0
    assert "form1" in _read(out / "kazamaki.json")
    assert _run("ks-check", config, out) == 0
    assert _read(out / "ks_check.json")["n_clusters"] == 3


def test_mze_summary(tmp_path):
    out = tmp_path / "out"
    assert _run("mze", _scenario(tmp_path), out) == 0
    summary = _read(out / "mze_summary.json")
    assert summary["scheme"] == "crank-nicolson"
    assert summary["g_form_offset"] == 1.0
    assert summary["status"] in ("PASS", "FAIL")
    assert {"mc", "grid_bias_band", "gap", "J_from_mze", "leakage"} <= set(summary)
    assert summary["grid_bias_band"] == pytest.approx(abs(summary["I_bar"] - summary["I_bar_half_grid"]))
    assert summary["gap"] == pytest.approx(summary["I_bar"] - summary["mc"]["I_bar"])
    within = abs(summary["gap"]) <= 3.0 * summary["mc"]["stderr_I"] + summary["grid_bias_band"]
    assert summary["status"] == ("PASS" if within else "FAIL")
    assert (out / "mze_density.csv").is_file()


def test_unknown_preset_is_a_validation_failure(tmp_path):
    out = tmp_path
    assert _run("criterion", _scenario(tmp_path, model="no-such-model"), out) == 2
    payload = _read(out / "error.json")
    assert payload["exit_code"] == 2
    assert payload["details"]["category"] == "validation"


def test_unstable_explicit_step_is_a_numerical_failure(tmp_path):
    out = tmp_path / "out"
    config = _scenario(tmp_path, scheme="explicit")
    path = tmp_path / "cfl.toml"
    path.write_text(Path(config).read_text().replace("dt = 0.015625", "dt = 0.25")
                    .replace("n_cells = 61", "n_cells = 400"))
    assert _run("mze", str(path), out) == 3
    payload = _read(out / "error.json")
    assert payload["details"]["category"] == "cfl"
    assert payload["details"]["suggested_dt"] > 0.0


@pytest.mark.slow
def test_flagship_equivalence(tmp_path):
    out = tmp_path / "out"
    config = str(SCENARIOS / "linear_gaussian.toml")
    assert _run("equivalence", config, out, "--paths", "4000", "--dt", "0.0078125") == 0
    report = _read(out / "equivalence.json")
    assert report["status"] == "PASS"
    assert report["n_diverged"] == 0


@pytest.mark.slow
def test_flagship_particle_oracle(tmp_path):
    path = tmp_path / "oracle.toml"
    path.write_text((SCENARIOS / "linear_gaussian.toml").read_text()
                    .replace("particles = 100000", "particles = 20000")
                    .replace("dump_paths = 10", "dump_paths = 2"))
    out = tmp_path / "out"
    assert _run("filter", str(path), out, "--paths", "200", "--dt", "0.00390625") == 0
    report = _read(out / "filter_report.json")
    assert report["oracle"]["within_band"] is True
    assert report["innovations"]["status"] == "PASS"
