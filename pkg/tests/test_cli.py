import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from kgscatter import cli

TINY = {
    "grid": {"n": 8},
    "slab": {"T": 2.0, "dt": 0.05},
    "scattering": {"T": 8.0, "dt": 0.1},
    "positivity": {"n": 4, "T": 2.0, "dt": 0.5},
    "samples": 1,
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "out")}))
    return path


def _invoke(runner, config, *args, env=None):
    return runner.invoke(cli.main, ["--config", str(config), *args], env=env or {}, catch_exceptions=False)


def test_list_prints_every_anchor(runner):
    result = runner.invoke(cli.main, ["verify", "--list"])
    assert result.exit_code == 0
    anchors = [line.split()[0] for line in result.output.splitlines()]
    assert anchors == [c.anchor for c in cli.REGISTRY]
    assert len(anchors) == len(set(anchors)) == 52


def test_passing_selection_exits_zero(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "verify", "--anchors", "grid,pseudodiff.power_routes")
    assert result.exit_code == 0, result.output
    assert result.output.count("PASS") == 4
    ledger = json.loads((tmp_path / "out" / "ledger.json").read_text())
    assert [e["anchor"] for e in ledger] == ["grid.fourier_roundtrip", "grid.derivative",
                                             "grid.weight_positivity", "pseudodiff.power_routes"]


def test_failing_entry_exits_one(runner, tmp_path):
    path = tmp_path / "strict.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path), "tolerances": {"grid.derivative": 1e-300}}))
    result = _invoke(runner, path, "verify", "--anchors", "grid.derivative")
    assert result.exit_code == 1
    assert result.output.startswith("FAIL")


def test_gamma_outside_interval_exits_two(runner, tmp_path):
    path = tmp_path / "gamma.json"
    path.write_text(json.dumps({"slab": {"gamma": 2.5}}))
    result = runner.invoke(cli.main, ["--config", str(path), "verify"])
    assert result.exit_code == 2
    assert "gamma = 2.5 violates 1/2 < γ < 1/2 + δ (δ = 1.5)" in result.output


@pytest.mark.parametrize("config, message", [
    ({"slab": {"T": 1.0, "dt": 0.3}}, "does not divide"),
    ({"scattering": {"T": 10.0, "dt": 0.3}}, "scattering"),
    ({"model": {"preset": "wormhole"}}, "unknown preset"),
    ({"grid": {"n": 2}}, "config invalid at grid/n"),
    ({"physics": {"delta": 0.9}}, "must exceed 1"),
    ({"tolerances": {"no.such.anchor": 1.0}}, "unknown anchors"),
    ({"model": {"metric": {"g_tt": "-1", "g_tx": 0, "g_xx": "exp(", "V": 0}}}, "metric spec rejected"),
])
def test_configuration_errors_exit_two(runner, tmp_path, config, message):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config))
    result = runner.invoke(cli.main, ["--config", str(path), "verify"])
    assert result.exit_code == 2
    assert message in result.output


def test_unreadable_config_exits_two(runner, tmp_path):
    result = runner.invoke(cli.main, ["--config", str(tmp_path / "missing.json"), "reduce"])
    assert result.exit_code == 2
    assert "cannot read config" in result.output


def test_unknown_anchor_exits_two(runner, tiny_config):
    result = _invoke(runner, tiny_config, "verify", "--anchors", "grid.nonsense")
    assert result.exit_code == 2
    assert "unknown anchor 'grid.nonsense'" in result.output


def test_output_directory_from_environment(runner, tiny_config, tmp_path):
    target = tmp_path / "from-env"
    result = _invoke(runner, tiny_config, "verify", "--anchors", "grid.derivative",
                     env={cli.OUTPUT_ENV: str(target)})
    assert result.exit_code == 0
    assert (target / "ledger.json").exists()
    assert not (tmp_path / "out").exists()


def test_load_config_layers():
    cfg = cli.load_config({"model": {"preset": "bump20"}}, {"slab": {"dt": 0.05}}, env={})
    assert cfg.preset == "bump20" and cfg.delta == 2.0
    assert cfg.T == cli.DEFAULT_CONFIG["slab"]["T"] and cfg.dt == 0.05
    custom = cli.load_config({"model": {"metric": {"g_tt": -1, "g_tx": 0, "g_xx": 1, "V": 0, "delta": 1.8}}}, env={})
    assert custom.preset is None and custom.delta == 1.8 and custom.model_name == "custom"


def test_select_checks_by_prefix():
    anchors = [c.anchor for c in cli.select_checks(["scattering.index"])]
    assert anchors == ["scattering.index", "scattering.index.gap", "scattering.index.order_invariance",
                       "scattering.index.brute_force"]
    assert len(cli.select_checks(None)) == len(cli.REGISTRY)


def test_raising_check_is_recorded_as_failure():
    def boom(_):
        raise RuntimeError("no data")

    check = cli.Check("custom.anchor", "a quantity", 1.0, boom)
    ledger = cli.run_checks(cli.Scenario(cli.load_config(TINY, env={})), [check])
    entry = ledger.entries[0]
    assert not entry.passed and "RuntimeError: no data" in entry.note
    assert not ledger.passed


def test_lower_bound_checks():
    check = cli.Check("x", "gap", 100.0, lambda s: None, bound="lower")
    assert check.passes(150.0, 100.0) and not check.passes(50.0, 100.0)
    assert not check.passes(float("nan"), 100.0)


def test_reduce_writes_artifacts(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "reduce", "--preset", "bump12")
    assert result.exit_code == 0
    assert json.loads(result.output)["validation"] is True
    summary = json.loads((tmp_path / "out" / "reduce.json").read_text())
    assert summary["model"] == "bump12" and len(summary["samples"]) == 11
    assert (tmp_path / "out" / "coefficients.csv").read_text().startswith("t,a_deviation")


def test_evolve_reports_conservation(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "evolve", "--flavor", "ad", "--T", "1.0", "--dt", "0.05")
    assert result.exit_code == 0
    summary = json.loads(result.output)
    assert summary["slab"]["T"] == 1.0 and summary["max_symplectic_residual"] < 1e-6
    assert (tmp_path / "out" / "evolve_ad.csv").exists()


def test_propagator_command(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "propagator", "--flavor", "feyn", "--positivity", "--emit-kernel")
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert report["positivity"]["relative_min"] > -1e-8
    header = (tmp_path / "out" / "kernel_feyn.csv").read_text().splitlines()[0]
    assert header == "t,s,row,col,re,im"


def test_propagator_original_frame(runner, tiny_config):
    result = _invoke(runner, tiny_config, "propagator", "--frame", "original")
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert report["frame"] == "original" and len(report["original_frame_residuals"]) == 1


def test_index_command(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "index", "--preset", "free")
    assert result.exit_code == 0
    summary = json.loads(result.output)
    assert [e["index"] for e in summary["estimates"]] == [0, 0] and summary["brute_force"] == 0


def test_moller_command(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "moller")
    assert result.exit_code == 0
    assert set(json.loads(result.output)) == {"converged", "tail", "unitarity"}
    rows = (tmp_path / "out" / "moller_convergence.csv").read_text().splitlines()
    assert rows[0] == "side,t,increment" and len(rows) > 2


def test_report_writes_everything(runner, tiny_config, tmp_path):
    result = _invoke(runner, tiny_config, "report", "--preset", "free")
    assert result.exit_code in (0, 1)
    out = tmp_path / "out"
    for name in ("report.json", "ledger.json", "moller_convergence.csv", "singular_values.csv",
                 "decay_fits.csv", "positivity_spectra.csv"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert len(report["ledger"]) == 52
    assert report["passed"] == (result.exit_code == 0)
    assert report["config"]["model"] == {"preset": "free"}


@pytest.mark.slow
def test_default_run_matches_golden_ledger(runner, tmp_path):
    golden = json.loads((Path(__file__).parent / "golden" / "bump15_ledger.json").read_text())
    result = runner.invoke(cli.main, ["verify", "--output", str(tmp_path)], env={}, catch_exceptions=False)
    ledger = json.loads((tmp_path / "ledger.json").read_text())
    assert result.exit_code == (0 if all(e["pass"] for e in golden) else 1)
    assert [e["anchor"] for e in ledger] == [e["anchor"] for e in golden]
    for got, want in zip(ledger, golden):
        assert got["pass"] == want["pass"], got["anchor"]
        # roundoff-level entries only need to stay at roundoff
        assert abs(got["value"] - want["value"]) <= max(1e-6 * abs(want["value"]), 1e-12), got["anchor"]
