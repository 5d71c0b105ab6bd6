"""Report assembly, input digests, schema validation and text tables."""

import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence

import jsonschema
import numpy as np

from app import __version__
from app.errors import ReportError
from app.models import Command, Report
from app.testing_power import PowerRow

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).parent / "schemas" / "report.schema.json"


def to_jsonable(value: Any) -> Any:
    """Plain JSON types for numpy scalars and arrays, enums and nested containers."""
    match value:
        case np.ndarray():
            return [to_jsonable(item) for item in value.tolist()]
        case np.floating() | float():
            number = float(value)
            return number if np.isfinite(number) else None
        case np.integer():
            return int(value)
        case np.bool_():
            return bool(value)
        case Enum():
            return value.value
        case dict():
            return {str(to_jsonable(key)): to_jsonable(item) for key, item in value.items()}
        case list() | tuple():
            return [to_jsonable(item) for item in value]
        case _:
            return value


def canonical_json(value: Any) -> str:
    return json.dumps(to_jsonable(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def inputs_digest(command: Command, config: dict, seed: int, data_bytes: Optional[bytes] = None) -> str:
    """sha256 over the data bytes, the canonical config, the seed and the command."""
    digest = hashlib.sha256()
    digest.update(data_bytes or b"")
    digest.update(b"\x00")
    digest.update(canonical_json(config).encode("utf-8"))
    digest.update(b"\x00")
    digest.update(f"{seed}:{command.value}".encode("utf-8"))
    return digest.hexdigest()


def build_report(
    command: Command, digest: str, seed: int, payload: dict, timing: Optional[dict[str, float]] = None
) -> Report:
    return Report(
        command=command,
        inputs_digest=digest,
        seed=seed,
        version=__version__,
        payload=to_jsonable(payload),
        timing=timing or {},
    )


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def validate_report(document: dict) -> None:
    """Raise ReportError when the document does not match the published schema."""
    try:
        jsonschema.validate(instance=document, schema=load_schema())
    except jsonschema.ValidationError as exc:
        logger.error(f"Report failed schema validation at {list(exc.absolute_path)}: {exc.message}")
        raise ReportError(
            f"report does not match the schema: {exc.message}", {"path": [str(p) for p in exc.absolute_path]}
        ) from exc


def report_document(report: Report) -> dict:
    return to_jsonable(report.model_dump(mode="json"))


def write_report(report: Report, path: Optional[Path | str]) -> str:
    """Validate and serialize a report; write it when a path is given."""
    document = report_document(report)
    validate_report(document)
    text = json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is not None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        logger.info(f"Report written to {target}")
    return text


def error_document(error: dict) -> dict:
    return {"error": to_jsonable(error)}


def format_power_table(rows: Sequence[PowerRow]) -> str:
    """Aligned text rendering: one column per delta, one row per test."""
    header = ["delta"] + [f"{row.delta:g}" for row in rows]
    lines = [
        ["S_N lower bound"] + [f"{row.s_n_lower:.3f}" for row in rows],
        ["S_N* exact"] + [f"{row.s_n_star_exact:.3f}" for row in rows],
        ["S_N* lower bound"] + [f"{row.s_n_star_lower:.3f}" for row in rows],
    ]
    label_width = max(len(line[0]) for line in [header] + lines)
    column_width = max(len(cell) for line in [header] + lines for cell in line[1:])
    return (
        "\n".join(
            line[0].ljust(label_width) + "  " + "  ".join(cell.rjust(column_width) for cell in line[1:])
            for line in [header] + lines
        )
        + "\n"
    )
