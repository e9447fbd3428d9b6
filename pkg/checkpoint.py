"""Adapter checkpoints and the YAML matrix container used for model weights."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from adapter import Adapter, AdapterConfig, InitScaleMode, ScalingRule, gamma
from numerics import DimensionError, InvalidStateError, Matrix

MATRIX_SCHEMA = {
    "type": "object",
    "properties": {
        "rows": {"type": "integer", "minimum": 1},
        "cols": {"type": "integer", "minimum": 1},
        "data": {"type": "array", "items": {"type": "number"}},
    },
    "required": ["rows", "cols", "data"],
    "additionalProperties": False,
}

ADAPTER_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Adapter checkpoint",
    "type": "object",
    "properties": {
        "kind": {"const": "adapter"},
        "rank": {"type": "integer", "minimum": 1},
        "rule": {
            "type": "object",
            "properties": {
                "variant": {"enum": ["lora", "rslora", "power", "none"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "nu": {"type": ["number", "null"]},
            },
            "required": ["variant", "alpha", "nu"],
            "additionalProperties": False,
        },
        "sigma_a": {"type": ["number", "null"], "minimum": 0},
        "init_scale_mode": {"enum": [m.value for m in InitScaleMode]},
        "gamma": {"type": "number"},
        "a": MATRIX_SCHEMA,
        "b": MATRIX_SCHEMA,
    },
    "required": ["kind", "rank", "rule", "sigma_a", "init_scale_mode", "gamma", "a", "b"],
    "additionalProperties": False,
}

MATRICES_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Matrix container",
    "type": "object",
    "properties": {
        "kind": {"const": "matrices"},
        "matrices": {"type": "object", "additionalProperties": MATRIX_SCHEMA},
    },
    "required": ["kind", "matrices"],
    "additionalProperties": False,
}


def matrix_to_record(m: Matrix) -> Dict[str, object]:
    rows, cols = m.shape
    return {"rows": rows, "cols": cols, "data": [float(x) for x in np.ravel(m)]}


def matrix_from_record(record: Mapping[str, object]) -> Matrix:
    rows, cols, data = record["rows"], record["cols"], record["data"]
    if len(data) != rows * cols:
        raise DimensionError(f"matrix record holds {len(data)} values, expected {rows}x{cols}")
    return np.array(data, dtype=np.float64).reshape(rows, cols)


def _dump(document: Dict[str, object], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(document, fh, sort_keys=False)
    return path


def _load(path: Path, schema: Dict[str, object]) -> Dict[str, object]:
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        document = yaml.safe_load(fh)
    Draft202012Validator(schema).validate(document)
    return document


def save_adapter(ad: Adapter, path: Path) -> Path:
    rule = ad.config.rule
    document = {
        "kind": "adapter",
        "rank": ad.config.rank,
        "rule": {"variant": rule.variant.value, "alpha": float(rule.alpha), "nu": rule.nu},
        "sigma_a": ad.config.sigma_a,
        "init_scale_mode": ad.config.init_scale_mode.value,
        "gamma": ad.gamma,
        "a": matrix_to_record(ad.a),
        "b": matrix_to_record(ad.b),
    }
    return _dump(document, path)


def load_adapter(path: Path) -> Adapter:
    document = _load(path, ADAPTER_SCHEMA)
    rule_doc = document["rule"]
    rule = ScalingRule(rule_doc["variant"], float(rule_doc["alpha"]), rule_doc["nu"])
    config = AdapterConfig(
        rank=document["rank"],
        rule=rule,
        sigma_a=document["sigma_a"],
        init_scale_mode=document["init_scale_mode"],
    )
    stored = float(document["gamma"])
    if stored != gamma(rule, config.rank):
        raise InvalidStateError(
            f"{path}: stored gamma {stored!r} does not match rule value {gamma(rule, config.rank)!r}"
        )
    return Adapter(
        a=matrix_from_record(document["a"]),
        b=matrix_from_record(document["b"]),
        config=config,
    )


def save_matrices(matrices: Mapping[str, Matrix], path: Path) -> Path:
    """Write named matrices (frozen weights, merged weights) to one container file."""
    document = {
        "kind": "matrices",
        "matrices": {name: matrix_to_record(m) for name, m in matrices.items()},
    }
    return _dump(document, path)


def load_matrices(path: Path) -> Dict[str, Matrix]:
    document = _load(path, MATRICES_SCHEMA)
    return {name: matrix_from_record(rec) for name, rec in document["matrices"].items()}
