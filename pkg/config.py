"""Experiment config documents: defaults table, schema validation, CLI overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from jsonschema import Draft202012Validator, ValidationError
from ruamel.yaml import YAML
from ruamel.yaml.comments import CommentedMap, CommentedSeq
from ruamel.yaml.error import YAMLError

from adapter import InitScaleMode
from experiments import TASKS, learning_rate_grid
from net import Nonlinearity

DEFAULTS: Dict[str, Any] = {
    "task": "char-lm",
    "seed": 0,
    "threads": 1,
    "ranks": [4, 8, 32, 128, 512],
    "rules": ["lora", "rslora"],
    "alpha": 16.0,
    "sigma_a": None,
    "init_scale_mode": "standard",
    "optimizer": "adamw",
    "learning_rate": 0.00005,
    "sgd_learning_rate": 0.01,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
    "weight_decay": 0.0,
    "steps": 2000,
    "batch_size": 32,
    "seeds": 3,
    "placement": "hidden",
    "probe_every": 10,
    "divergence_factor": 1000.0,
    "comparison_nus": [0.25, 0.5, 1.0, 2.0],
    "model": {
        "d_model": 64,
        "depth": 2,
        "context": 3,
        "nonlinearity": "relu",
        "layernorm": True,
        "d_in": 16,
        "d_out": 16,
        "corpus": None,
    },
    "theory": {
        "ranks": [4, 16, 64, 256, 1024],
        "rules": ["lora", "rslora", "power:0.25", "power:2"],
        "alpha": 1.0,
        "d1": 2,
        "d2": 8,
        "n_steps": 8,
        "n_seeds": 64,
        "eta": 0.01,
        "m": 2,
        "n_eval": 256,
        "input_mean": 0.0,
    },
    "lr_sweep": {
        "grid": learning_rate_grid(),
        "low_rank": 4,
        "reference_rule": "rslora",
        "reference_rank": 512,
    },
}

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_POSITIVE_INT = {"type": "integer", "minimum": 1}
_RANKS = {"type": "array", "minItems": 1, "items": _POSITIVE_INT}
_RULE = {
    "type": "string",
    "pattern": r"^(lora|rslora|none|power:[-+]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][-+]?[0-9]+)?)$",
}
_RULES = {"type": "array", "minItems": 1, "items": _RULE}

CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": list(TASKS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "threads": _POSITIVE_INT,
        "ranks": _RANKS,
        "rules": _RULES,
        "alpha": _POSITIVE,
        "sigma_a": {"type": ["number", "null"], "minimum": 0},
        "init_scale_mode": {"enum": [m.value for m in InitScaleMode]},
        "optimizer": {"enum": ["sgd", "adamw"]},
        "learning_rate": _POSITIVE,
        "sgd_learning_rate": _POSITIVE,
        "betas": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "eps": _POSITIVE,
        "weight_decay": {"type": "number", "minimum": 0},
        "steps": _POSITIVE_INT,
        "batch_size": _POSITIVE_INT,
        "seeds": _POSITIVE_INT,
        "placement": {
            "oneOf": [
                {"enum": ["all", "hidden"]},
                {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
            ]
        },
        "probe_every": _POSITIVE_INT,
        "divergence_factor": _POSITIVE,
        "comparison_nus": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": _POSITIVE_INT,
                "depth": {"type": "integer", "minimum": 0},
                "context": _POSITIVE_INT,
                "nonlinearity": {"enum": [k.value for k in Nonlinearity]},
                "layernorm": {"type": "boolean"},
                "d_in": _POSITIVE_INT,
                "d_out": _POSITIVE_INT,
                "corpus": {"type": ["string", "null"]},
            },
        },
        "theory": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ranks": {**_RANKS, "uniqueItems": True},
                "rules": _RULES,
                "alpha": _POSITIVE,
                "d1": _POSITIVE_INT,
                "d2": _POSITIVE_INT,
                "n_steps": {"type": "integer", "minimum": 0},
                "n_seeds": _POSITIVE_INT,
                "eta": _POSITIVE,
                "m": _POSITIVE_INT,
                "n_eval": _POSITIVE_INT,
                "input_mean": {"type": "number"},
            },
        },
        "lr_sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {"type": "array", "minItems": 1, "items": _POSITIVE},
                "low_rank": _POSITIVE_INT,
                "reference_rule": _RULE,
                "reference_rank": _POSITIVE_INT,
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid config document. ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str, line: Optional[int] = None) -> None:
        self.key = key
        self.line = line
        where = f"{key} (line {line})" if line is not None else key
        super().__init__(f"Invalid config at {where}: {message}")


def _is_yaml(path: Path) -> bool:
    return path.suffix.lower() in (".yaml", ".yml")


def load_document(path: Path) -> Any:
    """Parse a JSON or YAML config file into plain Python values."""
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if _is_yaml(path):
            return YAML(typ="safe", pure=True).load(text)
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("root", f"not valid JSON: {e}", e.lineno) from None
    except YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("root", f"not valid YAML: {e}", mark.line + 1 if mark else None) from None


def load_document_with_positions(path: Path):
    """Round-trip load that keeps line information; JSON parses as YAML too."""
    try:
        return YAML().load(path.read_text(encoding="utf-8"))
    except Exception:
        return None


def get_line_number_for_path(data_with_positions, path: List) -> Optional[int]:
    """1-indexed line of the entry at ``path`` (e.g. ``["model", "d_model"]``), if known."""
    if not path or data_with_positions is None:
        return None
    parent, current = None, data_with_positions
    for key in path:
        parent = current
        if isinstance(current, CommentedSeq) and isinstance(key, int) and 0 <= key < len(current):
            current = current[key]
        elif isinstance(current, CommentedMap) and key in current:
            current = current[key]
        else:
            # missing entries report their enclosing mapping
            return current.lc.line + 1 if isinstance(current, (CommentedMap, CommentedSeq)) else None
    key = path[-1]
    try:
        if isinstance(parent, CommentedMap):
            return parent.lc.key(key)[0] + 1
        if isinstance(parent, CommentedSeq):
            return parent.lc.item(key)[0] + 1
    except (AttributeError, IndexError, KeyError, TypeError):
        pass
    return None


def format_path(path: List) -> str:
    """``["model", "d_model"]`` -> ``model.d_model``; ``["ranks", 2]`` -> ``ranks[2]``."""
    if not path:
        return "root"
    result = []
    for part in path:
        if isinstance(part, int):
            result.append(f"[{part}]")
        elif result:
            result.append(f".{part}")
        else:
            result.append(str(part))
    return "".join(result)


def _error_path(error: ValidationError) -> List:
    path = list(error.absolute_path)
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        known = set(error.schema.get("properties", {}))
        extras = sorted(k for k in error.instance if k not in known)
        if extras:
            path.append(extras[0])
    return path


def collect_config_errors(document: Any) -> List[ValidationError]:
    validator = Draft202012Validator(CONFIG_SCHEMA)
    return sorted(validator.iter_errors(document), key=lambda e: list(map(str, e.absolute_path)))


def format_config_error(error: ValidationError, positions=None) -> ConfigError:
    path = _error_path(error)
    return ConfigError(format_path(path), error.message, get_line_number_for_path(positions, path))


def merge_defaults(defaults: Mapping[str, Any], document: Mapping[str, Any]) -> Dict[str, Any]:
    """Deep merge; nested mappings merge key by key, everything else replaces."""
    merged = copy.deepcopy(dict(defaults))
    for key, value in document.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge_defaults(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(document: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (``theory.ranks``); ``None`` values are skipped."""
    result = copy.deepcopy(dict(document))
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        target = result
        for name in parents:
            target = target.setdefault(name, {})
        target[leaf] = value
    return result


def validate_config(document: Any, positions=None) -> None:
    errors = collect_config_errors(document)
    if errors:
        raise format_config_error(errors[0], positions)


def resolve_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Defaults, then the config file, then CLI overrides; validated after each layer."""
    document: Any = {}
    positions = None
    if path is not None:
        document = load_document(path)
        if document is None:
            document = {}
        if not isinstance(document, dict):
            raise ConfigError("root", "config must be a mapping")
        positions = load_document_with_positions(path)
    merged = merge_defaults(DEFAULTS, document)
    validate_config(merged, positions)
    resolved = apply_overrides(merged, overrides or {})
    validate_config(resolved)
    return resolved


def config_comment(document: Mapping[str, Any]) -> str:
    """Compact single-line form embedded as the first line of every CSV."""
    return "config: " + json.dumps(document, sort_keys=True, separators=(",", ":"))
