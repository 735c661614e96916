"""Run configuration documents: schema validation, defaults, hashing.

Configs are versioned JSON; unknown keys are rejected everywhere. The
16-hex-digit config hash of the canonical serialization is embedded in every
produced artifact (corpus, checkpoint, report, trace) so mixed-provenance
inputs can be refused.
"""

from __future__ import annotations

import hashlib
import json

import jsonschema

from .errors import ConfigurationError

CONFIG_VERSION = 1

_SCHEDULE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "num_steps": {"type": "integer", "minimum": 1, "maximum": 10000},
        "t_min": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "t_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "warp": {"enum": ["linear", "karras"]},
        "rho": {"type": "number", "exclusiveMinimum": 0},
    },
}

_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "vocab_size": {"type": "integer", "minimum": 2},
        "embed_dim": {"type": "integer", "minimum": 2},
        "num_layers": {"type": "integer", "minimum": 1},
        "num_heads": {"type": "integer", "minimum": 1},
        "context_len": {"type": "integer", "minimum": 2},
        "eps_sigma": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
    },
}

_TRAINING = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "steps": {"type": "integer", "minimum": 0},
        "pretrain_steps": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "crop_len": {"type": "integer", "minimum": 2},
        "window_min": {"type": "integer", "minimum": 1},
        "window_max": {"type": "integer", "minimum": 1},
        "level_mode": {"enum": ["consecutive", "free"]},
    },
}

_CORPUS_MARKOV = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"const": "markov"},
        "order": {"type": "integer", "minimum": 1},
        "vocab": {"type": "integer", "minimum": 2},
        "concentration": {"type": "number", "exclusiveMinimum": 0},
        "num_sequences": {"type": "integer", "minimum": 1},
        "seq_len": {"type": "integer", "minimum": 2},
    },
}

_CORPUS_GRID = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"const": "grid"},
        "height": {"type": "integer", "minimum": 2},
        "width": {"type": "integer", "minimum": 2},
        "vocab": {"type": "integer", "minimum": 2},
        "patterns": {"type": "array", "items": {"enum": ["stripes", "checker", "blobs"]},
                     "minItems": 1},
        "num_images": {"type": "integer", "minimum": 1},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "config_version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer"},
        "model": _MODEL,
        "schedule": _SCHEDULE,
        "training": _TRAINING,
        "corpus": {"oneOf": [_CORPUS_MARKOV, _CORPUS_GRID]},
    },
}

CORPUS_SPEC_SCHEMA = {"oneOf": [_CORPUS_MARKOV, _CORPUS_GRID]}

DEFAULTS = {
    "seed": 0,
    "model": {"vocab_size": 66, "embed_dim": 64, "num_layers": 4,
              "num_heads": 4, "context_len": 640, "eps_sigma": 1e-6, "seed": 0},
    "schedule": {"num_steps": 25, "t_min": 1e-3, "t_max": 1.0,
                 "warp": "linear", "rho": 7.0},
    "training": {"steps": 200, "pretrain_steps": 0, "batch_size": 32,
                 "lr": 3e-4, "weight_decay": 0.01, "crop_len": 64,
                 "window_min": 16, "window_max": 96,
                 "level_mode": "consecutive"},
    "corpus_markov": {"order": 2, "vocab": 8, "concentration": 0.3,
                      "num_sequences": 256, "seq_len": 64},
    "corpus_grid": {"height": 16, "width": 16, "vocab": 16,
                    "patterns": ["stripes", "checker", "blobs"],
                    "num_images": 128},
}


def _validate(doc, schema, what: str):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid {what}: {path}: {e.message}") from e


def with_defaults(section: str, doc: dict | None) -> dict:
    merged = dict(DEFAULTS[section])
    if doc:
        merged.update(doc)
    return merged


def load_run_config(path: str) -> dict:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}") from e
    _validate(doc, RUN_CONFIG_SCHEMA, f"run config {path}")
    out = {"config_version": CONFIG_VERSION,
           "seed": doc.get("seed", DEFAULTS["seed"])}
    for section in ("model", "schedule", "training"):
        out[section] = with_defaults(section, doc.get(section))
    if "corpus" in doc:
        out["corpus"] = normalize_corpus_spec(doc["corpus"])
    return out


def normalize_corpus_spec(doc: dict) -> dict:
    _validate(doc, CORPUS_SPEC_SCHEMA, "corpus spec")
    kind = doc["kind"]
    merged = dict(DEFAULTS[f"corpus_{kind}"])
    merged.update({k: v for k, v in doc.items() if k != "kind"})
    merged["kind"] = kind
    return merged


def load_corpus_spec(path: str) -> dict:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}") from e
    return normalize_corpus_spec(doc)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc) -> str:
    """16 hex chars of the sha256 of the canonical serialization."""
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]
