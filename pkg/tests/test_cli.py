"""CLI subcommands and exit-code contract (0 ok, 2 config, 3 numerical, 4 validation)."""

import numpy as np
import pytest
import yaml

from nmqsd.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

YAML_N1 = """
name: cliunit
system:
  n_qubits: 1
  omega: [1.0]
kernel:
  gamma: 0.4
grid:
  dt: 0.02
  t_max: 2.0
initial_state: "1"
engines: [master, lindblad]
output:
  cache: false
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(YAML_N1)
    return path


class TestRunCommand:
    def test_run_ok(self, config_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
        assert (out / "manifest.yaml").exists()
        assert "wrote" in capsys.readouterr().out

    def test_seed_and_engines_override(self, config_path, tmp_path):
        out = tmp_path / "run"
        code = main(
            [
                "run",
                "--config",
                str(config_path),
                "--out",
                str(out),
                "--engines",
                "master",
                "--seed",
                "77",
            ]
        )
        assert code == EXIT_OK
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        assert manifest["engines"] == ["master"]
        assert manifest["seeds"]["master_seed"] == 77

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        data = yaml.safe_load(YAML_N1)
        data["system"]["mass"] = 1
        bad.write_text(yaml.safe_dump(data))
        assert main(["run", "--config", str(bad)]) == EXIT_CONFIG

    def test_unknown_engine_override(self, config_path):
        code = main(["run", "--config", str(config_path), "--engines", "magic"])
        assert code == EXIT_CONFIG

    def test_numerical_failure(self, tmp_path):
        data = yaml.safe_load(YAML_N1)
        data["engines"] = ["qsd"]
        data["qsd"] = {"n_traj": 1}
        bad = tmp_path / "explode.yaml"
        bad.write_text(yaml.safe_dump(data))
        code = main(["run", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert code == EXIT_NUMERICAL
        assert (tmp_path / "out" / "error.txt").exists()


class TestPresetsCommand:
    def test_lists_all(self, capsys):
        assert main(["presets"]) == EXIT_OK
        lines = capsys.readouterr().out.split()
        assert len(lines) == 8
        assert "fig1a" in lines and "fig2d" in lines


class TestCompareCommand:
    @pytest.fixture
    def two_runs(self, config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert (
                main(["run", "--config", str(config_path), "--out", str(out)])
                == EXIT_OK
            )
        return a, b

    def test_identical_runs_pass(self, two_runs, capsys):
        a, b = two_runs
        assert main(["compare", str(a), str(b)]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_tolerance_failure(self, two_runs, tmp_path, capsys):
        a, b = two_runs
        out_csv = tmp_path / "cmp.csv"
        code = main(
            [
                "compare",
                str(a),
                str(b),
                "--engine-a",
                "master",
                "--engine-b",
                "lindblad",
                "--tolerance",
                "1e-6",
                "--out",
                str(out_csv),
            ]
        )
        assert code == EXIT_VALIDATION
        assert "FAIL" in capsys.readouterr().out
        assert out_csv.read_text().splitlines()[0] == "t,trace_distance"

    def test_missing_run_dir(self, two_runs, tmp_path):
        a, _ = two_runs
        assert main(["compare", str(a), str(tmp_path / "nope")]) == EXIT_CONFIG


class TestSweepCommand:
    def test_dt_sweep(self, config_path, tmp_path, capsys):
        code = main(
            [
                "sweep",
                "--config",
                str(config_path),
                "--axis",
                "dt",
                "--values",
                "0.04,0.02",
                "--out",
                str(tmp_path / "sweep"),
            ]
        )
        assert code == EXIT_OK
        text = capsys.readouterr().out
        assert "observed convergence order" in text
        assert (tmp_path / "sweep" / "sweep.csv").exists()

    def test_axis_config_error(self, tmp_path):
        # dt sweeps need a single-qubit benchmark scenario
        code = main(
            [
                "sweep",
                "--preset",
                "fig1a",
                "--axis",
                "dt",
                "--values",
                "0.2,0.1",
            ]
        )
        assert code == EXIT_CONFIG


class TestValidateCommand:
    def test_passes(self, config_path, tmp_path, capsys):
        code = main(
            ["validate", "--config", str(config_path), "--out", str(tmp_path)]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "validation passed" in out
        report = yaml.safe_load((tmp_path / "validation.yaml").read_text())
        assert report["passed"] is True

    def test_negative_control(self, config_path, capsys):
        code = main(
            ["validate", "--config", str(config_path), "--perturbation", "1e-3"]
        )
        assert code == EXIT_VALIDATION
        assert "FAILED" in capsys.readouterr().out
