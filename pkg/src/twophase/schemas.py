"""JSON schemas for run configurations and output reports."""
from __future__ import annotations

import jsonschema

from .exceptions import ConfigError

_num_or_null = {"type": ["number", "null"]}
_interval = {"type": "array", "items": _num_or_null, "minItems": 2, "maxItems": 2}
_names = {"type": "array", "items": {"type": "string"}, "uniqueItems": True}
_transform = {"enum": ["none", "log", "standardize", "standardize_unit_variance"]}

DATA_SCHEMA = {
    "type": "object",
    "required": ["path", "y", "x"],
    "additionalProperties": False,
    "properties": {
        "path": {"type": "string"},
        "y": {"type": "string"},
        "x": _names,
        "z": _names,
        "r": {"type": ["string", "null"]},
        "transforms": {
            "type": "object",
            "additionalProperties": {"oneOf": [_transform, {"type": "array", "items": _transform}]},
        },
        "strata": {"type": "array", "items": _interval},
    },
}

SELECTION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "form": {"enum": ["logistic", "stratified"]},
        "strata": {"type": "array", "items": _interval},
        "strata_quantiles": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "sampled_strata": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "alpha": {"type": "array", "items": {"type": "number"}},
        "x": {"type": "string"},
        "x_cuts": {"type": "array", "items": {"type": "number"}},
        "x_quantiles": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "x_linear": _names,
    },
}

_model = {
    "type": "object",
    "required": ["family"],
    "additionalProperties": False,
    "properties": {"family": {"enum": ["logistic", "linear_gaussian"]}, "x": _names, "z": _names},
}

FIT_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["mode", "data", "outcome", "working", "selection", "estimators"],
    "additionalProperties": False,
    "properties": {
        "mode": {"const": "fit"},
        "data": DATA_SCHEMA,
        "outcome": _model,
        "working": {**_model, "properties": {k: v for k, v in _model["properties"].items() if k != "z"}},
        "selection": SELECTION_SCHEMA,
        "selection_ps": SELECTION_SCHEMA,
        "estimators": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "multimodal_check": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

SIMULATE_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["mode", "scenario"],
    "additionalProperties": False,
    "properties": {
        "mode": {"const": "simulate"},
        "scenario": {
            "type": "object",
            "properties": {
                "preset": {"type": "string"},
                "design": {"type": "string"},
                "n": {"type": "integer", "minimum": 50},
                "beta0": {"type": "array", "items": {"type": "number"}},
                "alpha0": {"type": "array", "items": {"type": "number"}},
                "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "strata": {"type": "array", "items": _interval},
                "x_cuts": {"type": "array", "items": {"type": "number"}},
                "post_stratification": {"type": "boolean"},
                "family": {"enum": ["logistic", "linear_gaussian"]},
                "x_categorical": {"type": "boolean"},
                "x_in_outcome": {"type": "boolean"},
                "selection_form": {"enum": ["logistic", "stratified"]},
                "ps_kind": {"enum": ["cells", "linear"]},
            },
            "additionalProperties": False,
        },
        "estimators": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "replications": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

SUBSAMPLE_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["mode", "data", "alpha"],
    "additionalProperties": False,
    "properties": {
        "mode": {"const": "subsample"},
        "data": DATA_SCHEMA,
        "strata_quantiles": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                             "minItems": 1},
        "sampled_strata": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "alpha": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMAS = {"fit": FIT_CONFIG_SCHEMA, "simulate": SIMULATE_CONFIG_SCHEMA, "subsample": SUBSAMPLE_CONFIG_SCHEMA}

_vector = {"type": "array", "items": {"type": "number"}}
_vector_or_null = {"type": "array", "items": _num_or_null}

RESULTS_SCHEMA = {
    "type": "object",
    "required": ["config", "seed", "data_summary", "results"],
    "properties": {
        "config": {"type": "object"},
        "seed": {"type": "integer"},
        "transforms": {"type": "object"},
        "data_summary": {
            "type": "object",
            "required": ["n", "phase2"],
            "properties": {"n": {"type": "integer"}, "phase2": {"type": "integer"}},
        },
        "selection": {"type": "object"},
        "results": {
            "type": "object",
            "additionalProperties": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["status", "parameters", "estimate", "se", "p_value", "covariance", "diagnostics"],
                        "properties": {
                            "status": {"const": "ok"},
                            "parameters": _names,
                            "estimate": _vector,
                            "se": _vector,
                            "p_value": _vector_or_null,
                            "covariance": {"type": "array", "items": _vector},
                            "diagnostics": {"type": "object"},
                        },
                    },
                    {
                        "type": "object",
                        "required": ["status", "error_type", "message"],
                        "properties": {
                            "status": {"const": "failed"},
                            "error_type": {"type": "string"},
                            "message": {"type": "string"},
                        },
                    },
                ]
            },
        },
    },
}

SIMREPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "estimators", "mean_phase2_size"],
    "properties": {
        "config": {"type": "object"},
        "mean_phase2_size": {"type": "number"},
        "estimators": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["parameters", "truth", "bias", "ese", "ase", "coverage", "n_success", "n_failed",
                             "unreliable"],
                "properties": {
                    "parameters": _names,
                    "truth": _vector,
                    "bias": {"oneOf": [_vector, {"type": "null"}]},
                    "ese": {"oneOf": [_vector, {"type": "null"}]},
                    "ase": {"oneOf": [_vector, {"type": "null"}]},
                    "coverage": {"oneOf": [{"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                                           {"type": "null"}]},
                    "n_success": {"type": "integer", "minimum": 0},
                    "n_failed": {"type": "integer", "minimum": 0},
                    "failures": {"type": "object"},
                    "unreliable": {"type": "boolean"},
                },
            },
        },
    },
}


def validate(instance, schema) -> None:
    """Raise :class:`ConfigError` naming the offending path when ``instance`` fails ``schema``."""
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None


def validate_config(config: dict) -> None:
    mode = config.get("mode") if isinstance(config, dict) else None
    if mode not in CONFIG_SCHEMAS:
        raise ConfigError(f"config 'mode' must be one of {sorted(CONFIG_SCHEMAS)}")
    validate(config, CONFIG_SCHEMAS[mode])
