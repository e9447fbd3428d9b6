"""Fixed CSV report schemas: writing, reading back and row validation."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from jsonschema import Draft202012Validator

from experiments import LrSweepRow, TrajectoryRecord
from theory import MomentEstimate, SlopeSummary

ColumnType = Union[str, List[str]]

COLUMNS: Dict[str, List[Tuple[str, ColumnType]]] = {
    "trajectory": [
        ("step", "integer"),
        ("rank", "integer"),
        ("rule", "string"),
        ("nu", "number"),
        ("alpha", "number"),
        ("seed", "integer"),
        ("loss", "number"),
        ("perplexity", ["number", "null"]),
        ("grad_norm_mean", "number"),
        ("act_m1", "number"),
        ("act_m2", "number"),
        ("diverged", "boolean"),
    ],
    "moments": [
        ("rank", "integer"),
        ("rule", "string"),
        ("nu", "number"),
        ("alpha", "number"),
        ("m", "integer"),
        ("statistic", "string"),
        ("estimate", "number"),
        ("stderr", "number"),
        ("n_seeds", "integer"),
    ],
    "slopes": [
        ("rule", "string"),
        ("nu", "number"),
        ("statistic", "string"),
        ("m", "integer"),
        ("slope", "number"),
        ("intercept", "number"),
        ("r_squared", "number"),
        ("n_points", "integer"),
    ],
    "lrsweep": [
        ("learning_rate", "number"),
        ("rule", "string"),
        ("rank", "integer"),
        ("final_loss", "number"),
        ("best_flag", "boolean"),
    ],
}

RECORD_TYPES = {
    "trajectory": TrajectoryRecord,
    "moments": MomentEstimate,
    "slopes": SlopeSummary,
    "lrsweep": LrSweepRow,
}


def fieldnames(kind: str) -> List[str]:
    if kind not in COLUMNS:
        raise ValueError(f"unknown report kind {kind!r}")
    return [name for name, _ in COLUMNS[kind]]


def build_schema(kind: str) -> Dict[str, object]:
    """JSON Schema for one parsed row of a report."""
    names = fieldnames(kind)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"{kind} row",
        "type": "object",
        "properties": {name: {"type": t} for name, t in COLUMNS[kind]},
        "required": names,
        "additionalProperties": False,
    }


def report_path(out_dir: Path, kind: str) -> Path:
    return Path(out_dir) / f"{kind}.csv"


def format_value(value: object) -> str:
    """17 significant digits for floats, so every value parses back exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def parse_value(text: str, column_type: ColumnType) -> object:
    if isinstance(column_type, list):
        if text == "" and "null" in column_type:
            return None
        column_type = column_type[0]
    if column_type == "integer":
        return int(text)
    if column_type == "number":
        return float(text)
    if column_type == "boolean":
        if text not in ("0", "1"):
            raise ValueError(f"expected 0 or 1, got {text!r}")
        return text == "1"
    return text


def _as_row(record: object) -> Mapping[str, object]:
    to_row = getattr(record, "to_row", None)
    return to_row() if callable(to_row) else record


def render_report(rows: Iterable[object], kind: str, comment: Optional[str] = None) -> str:
    names = fieldnames(kind)
    buffer = io.StringIO()
    if comment is not None:
        buffer.write(f"# {comment}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(names)
    for record in rows:
        row = _as_row(record)
        if set(row) != set(names):
            raise ValueError(
                f"{kind} row has columns {sorted(row)}, expected {names}"
            )
        writer.writerow([format_value(row[name]) for name in names])
    return buffer.getvalue()


def write_report(rows: Iterable[object], kind: str, path: Path, comment: Optional[str] = None) -> Path:
    text = render_report(rows, kind, comment)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def emit_reports(
    reports: Mapping[str, Sequence[object]],
    out_dir: Path,
    comment: Optional[str] = None,
) -> List[Path]:
    """Write ``<kind>.csv`` for each entry; returns the paths in the given order."""
    return [
        write_report(rows, kind, report_path(out_dir, kind), comment)
        for kind, rows in reports.items()
    ]


def read_report(path: Path, kind: str) -> List[Dict[str, object]]:
    """Typed rows of a report, skipping leading ``#`` comment lines."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Report file not found: {path}")
    names = fieldnames(kind)
    types = dict(COLUMNS[kind])
    with path.open(encoding="utf-8", newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != names:
        raise ValueError(f"{path}: header {reader.fieldnames} does not match {kind} schema {names}")
    validator = Draft202012Validator(build_schema(kind))
    rows = []
    for raw in reader:
        row = {name: parse_value(raw[name], types[name]) for name in names}
        validator.validate(row)
        rows.append(row)
    return rows


def parse_reports(path: Path, kind: str) -> List[object]:
    """Records of the report's type (TrajectoryRecord, MomentEstimate, ...)."""
    record_type = RECORD_TYPES[kind]
    return [record_type.from_row(row) for row in read_report(path, kind)]
