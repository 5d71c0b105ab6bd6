"""End-to-end tests for the cone-infer command line."""

import json

import jsonschema
import numpy as np
import pytest

from app import database
from app.cli import cli_overrides, build_parser, main, run, unknown_keys
from app.data_model import simulate_dataset, write_dataset
from app.models import AppConfig, Command, RunConfig, SimulationSpec
from app.reporting import load_schema
from app.services import RunRegistryService


def write_config(tmp_path, payload: dict) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def read_report(path) -> dict:
    document = json.loads(path.read_text(encoding="utf-8"))
    jsonschema.validate(document, load_schema())
    return document


def stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def null_csv(tmp_path_factory):
    spec = SimulationSpec(n_subjects=150, n_times=3, gamma=[0.2, 0.2, 0.2, 1.0, 0.0, -1.0])
    return str(write_dataset(simulate_dataset(spec, seed=42), tmp_path_factory.mktemp("data") / "null.csv"))


class TestWeightsCommand:
    """cone-infer weights."""

    def test_closed_form_from_angle(self, tmp_path):
        config = write_config(tmp_path, {"weights": {"phi": 1.0471975}})
        out = tmp_path / "weights.json"
        assert main(["weights", "--config", config, "--out", str(out)]) == 0

        document = read_report(out)
        assert document["command"] == "weights"
        np.testing.assert_allclose(document["payload"]["weights"], [1 / 3, 1 / 2, 1 / 6], atol=1e-6)

    def test_closed_form_from_hypothesis(self, capsys):
        assert main(["weights"]) == 0
        document = stdout_json(capsys)
        np.testing.assert_allclose(document["payload"]["weights"], [1 / 3, 1 / 2, 1 / 6], atol=1e-10)

    def test_level_route_alias(self, tmp_path, capsys):
        config = write_config(tmp_path, {"weights": {"m": 4}})
        assert main(["weights", "--config", config, "--weights", "level"]) == 0
        document = stdout_json(capsys)
        assert document["payload"]["source"] == "level_prob"
        np.testing.assert_allclose(document["payload"]["weights"], [1 / 4, 11 / 24, 1 / 4, 1 / 24], atol=1e-10)

    def test_tube_route_on_explicit_cone(self, tmp_path, capsys):
        config = write_config(tmp_path, {"weights": {"cone": {"dim": 3, "generators": np.eye(3).tolist()}}})
        assert main(["weights", "--config", config, "--weights", "tube"]) == 0
        np.testing.assert_allclose(stdout_json(capsys)["payload"]["weights"], [1 / 8, 3 / 8, 3 / 8, 1 / 8], atol=1e-4)

    def test_angle_out_of_domain(self, tmp_path, capsys):
        config = write_config(tmp_path, {"weights": {"phi": 4.0}})
        assert main(["weights", "--config", config]) == 4
        error = stdout_json(capsys)["error"]
        assert error["type"] == "DomainError"
        assert error["module"] == "app.tube_weights"

    def test_registry(self, tmp_path):
        url = f"sqlite:///{tmp_path / 'registry.db'}"
        report = run(RunConfig(command=Command.WEIGHTS, registry_url=url, seed=3))
        database.configure(url)
        records = RunRegistryService.find_by_digest(report.inputs_digest)
        assert len(records) == 1
        assert records[0].seed == 3


class TestPowerCommand:
    """cone-infer power."""

    def test_default_table(self, capsys):
        assert main(["power"]) == 0
        document = stdout_json(capsys)
        jsonschema.validate(document, load_schema())
        rows = document["payload"]["rows"]
        assert [row["delta"] for row in rows] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        assert rows[3]["s_n_lower"] == pytest.approx(0.852, abs=1e-3)
        assert rows[3]["s_n_star_exact"] == pytest.approx(0.771, abs=1e-3)

    def test_text_table(self, capsys):
        assert main(["power", "--table", "--delta-grid", "0,2"]) == 0
        text = capsys.readouterr().out
        assert "0.518" in text
        assert "0.327" in text
        assert "0.852" not in text

    def test_bad_delta_grid(self, capsys):
        assert main(["power", "--delta-grid", "1,x"]) == 2
        assert stdout_json(capsys)["error"]["type"] == "ConfigError"


class TestDataCommands:
    """cone-infer fit and test."""

    def test_fit(self, null_csv, capsys):
        assert main(["fit", "--data", null_csv]) == 0
        payload = stdout_json(capsys)["payload"]
        q_hat, q_tilde, q_bar = payload["q_values"]
        assert q_bar >= q_tilde - 1e-8 >= q_hat - 2e-8

    def test_test_is_reproducible(self, null_csv, tmp_path):
        outputs = [tmp_path / "first.json", tmp_path / "second.json"]
        for out in outputs:
            assert main(["test", "--data", null_csv, "--seed", "42", "--out", str(out)]) == 0
        first, second = (read_report(out) for out in outputs)

        assert first["inputs_digest"] == second["inputs_digest"]
        assert first["payload"]["p_value"] == second["payload"]["p_value"]
        assert 0.0 <= first["payload"]["p_value"] <= 1.0

    def test_alpha_override_changes_digest(self, null_csv, tmp_path):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["test", "--data", null_csv, "--out", str(first)]) == 0
        assert main(["test", "--data", null_csv, "--alpha", "0.01", "--out", str(second)]) == 0
        assert read_report(first)["inputs_digest"] != read_report(second)["inputs_digest"]
        assert read_report(second)["payload"]["alpha"] == 0.01

    def test_missing_data_path(self, capsys):
        assert main(["fit"]) == 2
        assert stdout_json(capsys)["error"]["type"] == "ConfigError"

    def test_unbalanced_data(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("subject,time,y,x1\n1,1,0.5,1\n1,2,0.7,2\n2,1,1.5,1\n", encoding="utf-8")
        assert main(["test", "--data", str(path)]) == 3
        error = stdout_json(capsys)["error"]
        assert error["type"] == "BalanceError"
        assert error["module"] == "app.data_model"

    def test_data_file_not_found(self, tmp_path, capsys):
        assert main(["fit", "--data", str(tmp_path / "missing.csv")]) == 3
        assert stdout_json(capsys)["error"]["type"] == "ParseError"


class TestConfiguration:
    """Config validation and command-line precedence."""

    def test_unknown_keys_exit_two(self, tmp_path, capsys):
        config = write_config(tmp_path, {"extra": 1, "solver": {"bogus": 2, "tol": 1e-6}})
        assert main(["power", "--config", config]) == 2
        error = stdout_json(capsys)["error"]
        assert error["detail"]["unknown_keys"] == ["extra", "solver.bogus"]

    def test_invalid_value(self, tmp_path, capsys):
        config = write_config(tmp_path, {"test": {"alpha": 2.0}})
        assert main(["power", "--config", config]) == 2
        assert "test.alpha" in stdout_json(capsys)["error"]["message"]

    def test_malformed_json(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text("{not json", encoding="utf-8")
        assert main(["power", "--config", str(path)]) == 2

    def test_simulate_needs_enough_replicates(self, tmp_path, capsys):
        config = write_config(tmp_path, {"simulation": {"replicates": 50}})
        assert main(["simulate", "--config", config]) == 2
        assert stdout_json(capsys)["error"]["type"] == "ConfigError"

    def test_unknown_key_paths(self):
        payload = {"hypothesis": {"m": 3, "order": 1}, "simulation": {"effect": {"direction": [1.0], "size": 2}}}
        assert unknown_keys(payload, AppConfig) == ["hypothesis.order", "simulation.effect.size"]

    def test_overrides_route_by_command(self):
        args = build_parser().parse_args(["simulate", "--weights", "mc", "--alpha", "0.1"])
        assert cli_overrides(Command.SIMULATE, args) == {
            "simulation": {"weight_route": "monte_carlo", "alphas": [0.1]},
            "test": {"alpha": 0.1},
        }

    def test_command_line_beats_file(self, tmp_path, capsys):
        config = write_config(tmp_path, {"power": {"b1": 4.0, "delta_grid": [1.0]}})
        assert main(["power", "--config", config, "--b1", "5.991"]) == 0
        payload = stdout_json(capsys)["payload"]
        assert payload["b1"] == 5.991
        assert [row["delta"] for row in payload["rows"]] == [1.0]
