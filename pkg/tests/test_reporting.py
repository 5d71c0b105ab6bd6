"""Tests for report assembly, digests and the published schema."""

import json
from enum import Enum

import jsonschema
import numpy as np
import pytest

from app import __version__
from app.errors import ReportError
from app.models import Command
from app.reporting import (
    build_report,
    canonical_json,
    error_document,
    format_power_table,
    inputs_digest,
    load_schema,
    report_document,
    to_jsonable,
    write_report,
)
from app.testing_power import reproduce_table1
from app.tube_weights import weights_closed_form_d2


class Colour(str, Enum):
    RED = "red"


class TestToJsonable:
    """Conversion of numpy and enum values."""

    def test_nested_values(self):
        value = {"a": np.array([[1.0, 2.0]]), "b": np.int64(3), "c": (np.float32(0.5), Colour.RED), "d": np.bool_(True)}
        assert to_jsonable(value) == {"a": [[1.0, 2.0]], "b": 3, "c": [0.5, "red"], "d": True}

    def test_non_finite_numbers_become_null(self):
        assert to_jsonable([float("nan"), np.inf, 1.0]) == [None, None, 1.0]

    def test_canonical_json_sorts_keys(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


class TestInputsDigest:
    """sha256 over data, config, seed and command."""

    def test_stable_and_key_order_independent(self):
        first = inputs_digest(Command.TEST, {"a": 1, "b": {"c": 2}}, 7, b"data")
        second = inputs_digest(Command.TEST, {"b": {"c": 2}, "a": 1}, 7, b"data")
        assert first == second
        assert len(first) == 64

    @pytest.mark.parametrize(
        "change",
        [
            {"command": Command.FIT},
            {"config": {"a": 2}},
            {"seed": 8},
            {"data": b"other"},
        ],
    )
    def test_sensitive_to_each_input(self, change):
        base = {"command": Command.TEST, "config": {"a": 1}, "seed": 7, "data": b"data"}
        varied = {**base, **change}
        assert inputs_digest(base["command"], base["config"], base["seed"], base["data"]) != inputs_digest(
            varied["command"], varied["config"], varied["seed"], varied["data"]
        )


class TestReports:
    """Building, validating and writing reports."""

    def weights_report(self):
        payload = weights_closed_form_d2(np.pi / 3).to_dict()
        return build_report(Command.WEIGHTS, "a" * 64, 0, payload, {"compute": 0.01})

    def test_build_report(self):
        report = self.weights_report()
        assert report.version == __version__
        assert report.payload["weights"] == pytest.approx([1 / 3, 1 / 2, 1 / 6])

    def test_document_matches_schema(self):
        jsonschema.validate(report_document(self.weights_report()), load_schema())

    def test_write_report(self, tmp_path):
        path = tmp_path / "out" / "report.json"
        text = write_report(self.weights_report(), path)
        assert json.loads(path.read_text(encoding="utf-8")) == json.loads(text)

    def test_bad_digest_is_rejected(self):
        report = build_report(Command.WEIGHTS, "not-a-digest", 0, weights_closed_form_d2(1.0).to_dict())
        with pytest.raises(ReportError) as info:
            write_report(report, None)
        assert info.value.detail["path"] == ["inputs_digest"]

    def test_payload_shape_is_checked(self):
        report = build_report(Command.POWER, "b" * 64, 0, {"rows": []})
        with pytest.raises(ReportError):
            write_report(report, None)

    def test_error_document(self):
        document = error_document({"type": "ParseError", "detail": {"value": np.float64(1.5)}})
        assert document == {"error": {"type": "ParseError", "detail": {"value": 1.5}}}


def test_power_table_text():
    text = format_power_table(reproduce_table1())
    lines = text.splitlines()
    assert lines[0].split()[0] == "delta"
    assert lines[1].startswith("S_N lower bound")
    assert "0.852" in lines[1]
    assert "0.771" in lines[2]
    assert "0.710" in lines[3]
