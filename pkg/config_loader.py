"""
Loads and writes run configuration files.

A config file is a JSON object whose keys are flat dotted paths into
RunConfig, e.g. {"experiment": "sine", "meta_learner": "metasgd", "seed": 1,
"train.iterations": 5000}. Nested objects are accepted too. Every key left
out takes its experiment-specific default.
"""
import json
import logging
from typing import Any

from pydantic import ValidationError

from data_models import RunConfig
from errors import ConfigError

# Sections that describe where a run writes, not what it computes.
_NON_SEMANTIC_SECTIONS = ("output",)


def nest_keys(flat: dict[str, Any]) -> dict[str, Any]:
    """Turns {"a.b": 1} into {"a": {"b": 1}}, merging nested objects given directly."""
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        if not isinstance(key, str) or not key:
            raise ConfigError(f"Invalid config key {key!r}.")
        parts = key.split(".")
        node = nested
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key '{key}' conflicts with scalar key '{'.'.join(parts[: depth + 1])}'.")
            node = child
        leaf = parts[-1]
        if isinstance(value, dict):
            existing = node.setdefault(leaf, {})
            if not isinstance(existing, dict):
                raise ConfigError(f"Config key '{key}' conflicts with an earlier scalar value.")
            for sub_key, sub_value in nest_keys(value).items():
                if sub_key in existing and not (isinstance(existing[sub_key], dict) and isinstance(sub_value, dict)):
                    raise ConfigError(f"Config key '{key}.{sub_key}' is given twice.")
                existing[sub_key] = sub_value
        else:
            if leaf in node:
                raise ConfigError(f"Config key '{key}' is given twice.")
            node[leaf] = value
    return nested


def flatten_keys(nested: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in nested.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_keys(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def _describe(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<config>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def build_config(data: dict[str, Any]) -> RunConfig:
    """
    Validates a flat or nested config mapping.

    Raises:
        ConfigError: For unknown keys or invalid values; the message names
            each offending key path.
    """
    if not isinstance(data, dict):
        raise ConfigError("A config must be a JSON object.")
    try:
        return RunConfig.model_validate(nest_keys(data))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_describe(e)}") from e


def parse_config(path: str) -> RunConfig:
    """
    Reads and validates a JSON config file.

    Raises:
        ConfigError: If the file is missing, is not valid JSON, or fails validation.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    cfg = build_config(data)
    logging.info(f"Loaded config {path}: {cfg.experiment}/{cfg.meta_learner}, seed {cfg.seed}")
    return cfg


def serialize_config(cfg: RunConfig) -> dict[str, Any]:
    """The complete config as flat dotted keys; build_config inverts it."""
    return flatten_keys(cfg.model_dump(mode="json"))


def canonical_json(cfg: RunConfig) -> str:
    """Sorted, whitespace-free JSON of the settings that determine a run's results."""
    flat = {
        k: v for k, v in serialize_config(cfg).items() if k.split(".", 1)[0] not in _NON_SEMANTIC_SECTIONS
    }
    return json.dumps(flat, sort_keys=True, separators=(",", ":"))
