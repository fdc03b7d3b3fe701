"""JSON schemas for the command-line config files."""
from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .explainers import METHODS


class ConfigError(ValueError):
    """A config file is unreadable or violates its schema."""


_INT = {"type": "integer"}
_NUM = {"type": "number"}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "image_size": {"type": "integer", "minimum": 8},
        "num_classes": {"const": 2},
        "samples_per_class": {"type": "integer", "minimum": 1},
        "placement": {"enum": ["in_object", "in_background"]},
        "object_shape": {"enum": ["disk", "rectangle"]},
        "object_area_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "noise_std": {"type": "number", "minimum": 0},
        "seed": _INT,
        "stripe_period": {"type": "integer", "minimum": 2},
        "signal_size": {"type": "integer", "minimum": 1},
        "margin": {"type": "integer", "minimum": 0},
    },
}

EXPLAINER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"enum": list(METHODS)},
        "patch": {"type": ["integer", "null"], "minimum": 1},
        "stride": {"type": ["integer", "null"], "minimum": 1},
        "fill": {"type": "number", "minimum": 0, "maximum": 1},
        "target_layer": {"type": ["integer", "null"], "minimum": 0},
        "grid": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "ridge": {"type": "number", "exclusiveMinimum": 0},
        "seed": _INT,
        "exhaustive": {"type": "boolean"},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "seed": _INT,
        "strategy": {"enum": ["a", "b", "c", "d", None]},
    },
}

_EXPERIMENT_PROPERTIES = {
    "synth": SYNTH_SCHEMA,
    "dataset_dir": {"type": "string"},
    "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "strategy": {"enum": ["a", "b", "c", "d", None]},
    "explainers": {"type": "array", "items": EXPLAINER_SCHEMA, "minItems": 1},
    "eval_sample_cap": {"type": "integer", "minimum": 1},
    "eval_sampling": {"enum": ["fixed", "per_epoch"]},
    "train": TRAIN_SCHEMA,
    "seed": _INT,
    "min_correct": {"type": "integer", "minimum": 1},
    "adapt_epochs": {"type": "integer", "minimum": 0},
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": _EXPERIMENT_PROPERTIES,
    "not": {"required": ["synth", "dataset_dir"]},
}

TRAIN_DEMO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **_EXPERIMENT_PROPERTIES,
        "strategies": {
            "type": "array",
            "items": {"enum": ["a", "b", "c", "d"]},
            "uniqueItems": True,
        },
        "masked_background": {"type": "boolean"},
    },
    "not": {"required": ["synth", "dataset_dir"]},
}

EVALUATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "explainers"],
    "properties": {
        "dataset": {"type": "string"},
        "model": {"type": "string"},
        "predictions": {"type": "string"},
        "heatmaps": {"type": "string"},
        "explainers": {"type": "array", "items": EXPLAINER_SCHEMA, "minItems": 1},
        "eval_sample_cap": {"type": "integer", "minimum": 1},
        "seed": _INT,
        "min_correct": {"type": "integer", "minimum": 1},
    },
    "anyOf": [{"required": ["model"]}, {"required": ["predictions"]}],
}


def _where(error: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in error.absolute_path)
    return path or "<root>"


def validate(data, schema: dict, source: str = "config") -> dict:
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{source}: field {_where(exc)}: {exc.message}") from None
    return data


def load_config(path, schema: dict) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return validate(data, schema, str(path))
