"""Run configuration: JSON schema, validation and canonical form.

A run config is one JSON document with a ``schema_version`` field.
Validation errors name the offending field as a dotted path such as
``time.nodes``.  :func:`canonical` fills every default and normalises the
domain and model specs, so a parsed config re-serialises to a fixed form.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .geometry import Domain
from .model import Model

SCHEMA_VERSION = 1

PANELS = ("hjb", "lambda-plus", "continuity", "superdiff", "semiconcavity", "sensitivity")

_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_POINTS = {"type": ["array", "null"], "items": {"type": "array", "items": {"type": "number"}, "minItems": 2}}
_RADII = {"type": "array", "items": _POS, "minItems": 3}

PANEL_DEFAULTS = {
    "hjb": {"gated": True, "n_interior": 100, "n_boundary": 40, "tol_interior": 1e-2, "tol_boundary": 2e-2},
    "lambda-plus": {"gated": True, "n_boundary": 40, "tol_tangency": 1e-8, "radii": [0.04, 0.02, 0.01],
                    "n_limit": 5},
    "continuity": {"gated": True, "n_bumps": 10, "tol": 1e-2, "tol_velocity": 5e-2},
    "superdiff": {"gated": True, "n_points": 6, "r": 0.02, "ray_tol": 1e-2, "viscosity_tol": 2e-2},
    "semiconcavity": {"gated": True, "points": None, "n_points": 4, "k_min": 3, "k_max": 9,
                      "min_exponent_boundary": 1.45, "min_exponent_interior": 1.9},
    "sensitivity": {"gated": True, "points": None, "n_points": 20, "k_min": 3, "k_max": 9, "factor": 1.2},
}

_PANEL_PROPS = {
    "hjb": {"n_interior": _POS_INT, "n_boundary": _POS_INT, "tol_interior": _POS, "tol_boundary": _POS},
    "lambda-plus": {"n_boundary": _POS_INT, "tol_tangency": _POS, "radii": _RADII, "n_limit": _POS_INT},
    "continuity": {"n_bumps": _POS_INT, "tol": _POS, "tol_velocity": _POS},
    "superdiff": {"n_points": _POS_INT, "r": _POS, "ray_tol": _POS, "viscosity_tol": _POS},
    "semiconcavity": {"points": _POINTS, "n_points": _POS_INT, "k_min": _POS_INT, "k_max": _POS_INT,
                      "min_exponent_boundary": {"type": "number"}, "min_exponent_interior": {"type": "number"}},
    "sensitivity": {"points": _POINTS, "n_points": _POS_INT, "k_min": _POS_INT, "k_max": _POS_INT,
                    "factor": _POS},
}

_FIELD = {"type": ["string", "object"]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "domain", "model", "m0", "time"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "domain": {
            "type": "object",
            "required": ["kind"],
            "oneOf": [
                {"properties": {"kind": {"const": "interval"},
                                "bounds": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                           "maxItems": 2}},
                 "required": ["bounds"], "additionalProperties": False},
                {"properties": {"kind": {"const": "disk"},
                                "center": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                           "maxItems": 2},
                                "radius": _POS},
                 "required": ["radius"], "additionalProperties": False},
                {"properties": {"kind": {"const": "ellipse"},
                                "center": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                                           "maxItems": 2},
                                "semi_axes": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}},
                 "required": ["semi_axes"], "additionalProperties": False},
            ],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lagrangian": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["quadratic", "drift-quadratic", "custom-convex"]},
                        "potential": _FIELD,
                        "drift": _FIELD,
                        "name": {"enum": ["softabs"]},
                        "eps": _POS,
                    },
                },
                "coupling": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "form": {"enum": ["zero", "kernel", "field"]},
                        "sigma": _POS,
                        "strength": {"type": "number", "minimum": 0},
                        "field": _FIELD,
                    },
                },
                "terminal": _FIELD,
            },
        },
        "m0": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["particles", "grid", "sample"]},
                "points": {"type": "array"},
                "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "n": {"type": "integer", "minimum": 1, "maximum": 10_000},
                "support": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "density": {"enum": ["uniform", "gaussian"]},
                "mean": {"type": "array", "items": {"type": "number"}},
                "std": _POS,
            },
            "additionalProperties": False,
        },
        "time": {
            "type": "object",
            "required": ["nodes"],
            "additionalProperties": False,
            "properties": {"T": _POS, "nodes": {"type": "integer", "minimum": 2}},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol_opt": _POS,
                "sampler_steps": {"type": "integer", "minimum": 2},
                "grid_points": {"type": "integer", "minimum": 4},
                "max_paths": _POS_INT,
                "delta_b": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "delta_m": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "fixed_point": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"K_max": _POS_INT, "tol": _POS, "init": {"enum": ["static", "free"]}},
        },
        "panels": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                name: {"type": "object", "additionalProperties": False,
                       "properties": {"gated": {"type": "boolean"}, **props}}
                for name, props in _PANEL_PROPS.items()
            },
        },
        "output": {"type": "object", "additionalProperties": False, "properties": {"dir": {"type": "string"}}},
    },
    "if": {"properties": {"m0": {"properties": {"kind": {"const": "sample"}}}}},
    "then": {"required": ["seed"]},
}

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "solver": {"tol_opt": 1e-6, "sampler_steps": 200, "grid_points": 801, "max_paths": 10_000,
               "delta_b": None, "delta_m": None},
    "fixed_point": {"K_max": 100, "tol": 1e-2, "init": "static"},
    "panels": {},
    "output": {"dir": "out"},
}


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    elif err.validator == "additionalProperties" and "'" in err.message:
        parts.append(err.message.split("'")[1])
    return ".".join(p for p in parts if p) or "<root>"


def validate(cfg) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "the config must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(list(e.absolute_path)), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        # oneOf failures hide the branch error; report the deepest matching one
        if err.context:
            sub = max(err.context, key=lambda e: len(list(e.absolute_path)))
            err = sub
        raise ConfigError(_path(err), err.message)
    _semantic_checks(cfg)


def _semantic_checks(cfg):
    dom_spec = cfg["domain"]
    if dom_spec["kind"] == "interval":
        lo, hi = dom_spec["bounds"]
        if not lo < hi:
            raise ConfigError("domain.bounds", "lower bound must be below the upper bound")
    try:
        dom = Domain.from_config(dom_spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError("domain", str(exc)) from exc
    model_spec = cfg["model"]
    for key, sub in (("lagrangian", model_spec.get("lagrangian", {})),
                     ("coupling", model_spec.get("coupling", {}))):
        try:
            Model.from_config({key: sub}, dom.dim)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"model.{key}", str(exc)) from exc
    try:
        Model.from_config({"terminal": model_spec.get("terminal", "zero")}, dom.dim)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError("model.terminal", str(exc)) from exc
    m0 = cfg["m0"]
    if m0["kind"] == "particles" and "points" not in m0:
        raise ConfigError("m0.points", "particle lists need 'points'")
    if m0["kind"] in ("grid", "sample") and "n" not in m0:
        raise ConfigError("m0.n", f"kind {m0['kind']!r} needs a particle count")
    for name, opts in cfg.get("panels", {}).items():
        if "k_min" in opts or "k_max" in opts:
            merged = {**PANEL_DEFAULTS[name], **opts}
            if merged["k_min"] > merged["k_max"]:
                raise ConfigError(f"panels.{name}.k_min", "k_min must not exceed k_max")


def canonical(cfg) -> dict:
    """Validated config with all defaults filled and specs normalised."""
    validate(cfg)
    out = copy.deepcopy(cfg)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            out[key] = {**copy.deepcopy(val), **out.get(key, {})}
        else:
            out.setdefault(key, val)
    out["time"] = {"T": float(out["time"].get("T", 1.0)), "nodes": int(out["time"]["nodes"])}
    dom = Domain.from_config(out["domain"])
    out["domain"] = dom.to_config()
    out["model"] = Model.from_config(out["model"], dom.dim).to_config()
    out["panels"] = {name: {**copy.deepcopy(PANEL_DEFAULTS[name]), **opts}
                     for name, opts in sorted(out["panels"].items())}
    return json.loads(json.dumps(out))  # tuples to lists, plain types only


def dumps_canonical(cfg) -> str:
    return json.dumps(canonical(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg) -> str:
    """SHA-256 of the canonical serialisation."""
    return hashlib.sha256(dumps_canonical(cfg).encode()).hexdigest()


def load(path) -> dict:
    """Read and validate a config file; returns the canonical form."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return canonical(raw)
