"""Tests for the command-line interface."""

import re

import pytest
from typer.testing import CliRunner
import yaml

from src.pwa import experiments
from src.pwa.cli import app
from src.pwa.config import Config
from src.pwa.experiments import SeedOutcome, TrialReport

runner = CliRunner()

PRESETS = {
    "default": {"seeds": "0", "restarts": 2, "max_iter": 5},
    "tiny": {
        "instance": {
            "kind": "regression",
            "d": 1,
            "K": 2,
            "maps": [[[1.0, 0.0]], [[0.0, 1.0]]],
            "directions": [[-1.0], [1.0]],
            "offsets": [0.0, 0.0],
            "separation": 1.0,
        },
        "T": 400,
        "epoch_length": 100,
    },
    "threshold": {"T": 64, "learner": "halving"},
}

DIGEST = re.compile(r"\b[0-9a-f]{64}\b")


def invoke(*args: str):
    return runner.invoke(app, list(args))


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(PRESETS))
    yield str(path)
    Config._instance = None
    Config._active_preset = "default"


class TestCommands:
    """Tests for the experiment subcommands."""

    def test_regress_writes_reports(self, config_file, tmp_path):
        out = tmp_path / "runs"
        result = invoke(
            "regress", "-c", config_file, "-p", "tiny", "--seeds", "0..1",
            "-o", str(out),
        )  # fmt: skip
        assert result.exit_code == 0, result.output
        assert "seed 0:" in result.output
        assert (out / "report_1.json").exists()
        assert (out / "summary.csv").exists()

    def test_digest_is_reproducible(self, config_file, tmp_path):
        """Test that two runs of the same seeds print the same digest."""
        digests = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            result = invoke(
                "adversary", "-c", config_file, "-p", "threshold", "--seeds", "0..3",
                "-o", out, "--deterministic-hash",
            )  # fmt: skip
            assert result.exit_code == 0, result.output
            digests.append(DIGEST.findall(result.output)[-1])
        assert digests[0] == digests[1]

    def test_horizon_option(self, config_file, tmp_path):
        """Test that --T overrides the preset horizon."""
        result = invoke(
            "adversary", "-c", config_file, "-p", "threshold", "--T", "16",
            "-o", str(tmp_path),
        )  # fmt: skip
        assert result.exit_code == 0, result.output
        assert (tmp_path / "series_0.csv").read_text().count("\n") == 17


class TestExitCodes:
    """Tests for the mapping of failures to exit codes."""

    def test_unknown_key_is_config_error(self, config_file, tmp_path):
        result = invoke(
            "regress", "-c", config_file, "-p", "tiny", "-s", "epochs=3",
            "-o", str(tmp_path),
        )  # fmt: skip
        assert result.exit_code == 2

    def test_unknown_preset(self, config_file, tmp_path):
        result = invoke("regress", "-c", config_file, "-p", "nope", "-o", str(tmp_path))
        assert result.exit_code == 2

    def test_non_finite_report(self, config_file, tmp_path, monkeypatch):
        """Test that a non-finite value in a report exits with code 3."""

        def broken(config, seed):
            values = {"x": float("inf")}
            report = TrialReport(mode="adversary", seed=seed, values=values)
            return SeedOutcome(seed=seed, report=report, line="")

        monkeypatch.setitem(experiments.RUNNERS, "adversary", broken)
        result = invoke(
            "adversary", "-c", config_file, "-p", "threshold", "-o", str(tmp_path)
        )
        assert result.exit_code == 3


class TestSweep:
    """Tests for grid sweeps."""

    def test_two_by_two_grid(self, config_file, tmp_path):
        result = invoke(
            "sweep", "adversary", "-c", config_file, "-p", "threshold",
            "-g", "T=8,16", "-g", "learner=halving,constant", "-o", str(tmp_path),
        )  # fmt: skip
        assert result.exit_code == 0, result.output
        lines = (tmp_path / "sweep_summary.csv").read_text().splitlines()
        assert len(lines) == 1 + 4
        assert (tmp_path / "cell_3" / "summary.csv").exists()

    def test_unknown_mode(self, config_file):
        assert invoke("sweep", "fly", "-c", config_file).exit_code == 2

    def test_grid_cap(self, config_file, tmp_path):
        result = invoke(
            "sweep", "adversary", "-c", config_file, "-p", "threshold",
            "-s", "grid_cap=2", "-g", "T=8,16,32", "-o", str(tmp_path),
        )  # fmt: skip
        assert result.exit_code == 2
