"""Experiment configuration: JSON schema, defaults and canonical serialization."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import jsonschema

PIPELINES = ("spectrum", "manifold", "stack", "srb", "entropy", "verify")

# every budget is a positive number; missing entries take these values
BUDGET_DEFAULTS = {
    "spectrum": {"n": 100_000, "n_burn": 1000},
    "manifold": {"iterations": 40, "radius": 0.05, "spacing": 1e-3, "window": 150},
    "stack": {"points": 40, "spacing": 1e-3, "iterations": 14, "window": 80},
    "srb": {"n_burn": 500, "n_orbits": 100, "n_samples": 10_000, "bins": 32, "N_max": 60},
    "entropy": {"n_orbits": 64, "n_samples": 10_000, "n_burn": 500, "n_spectrum": 100_000,
                "max_horizon": 10, "min_occupancy": 50, "bootstrap": 64},
    "verify": {"scale": 1.0},
}

_budget_block = {
    name: {"type": "object", "additionalProperties": False,
           "properties": {k: {"type": "number", "exclusiveMinimum": 0} for k in keys}}
    for name, keys in BUDGET_DEFAULTS.items()
}

_term = {"type": "object", "additionalProperties": False, "required": ["coef"],
         "properties": {"coef": {"type": "number"},
                        "powers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        "trig": {"enum": ["none", "cos", "sin"]},
                        "freq": {"type": "array", "items": {"type": "number"}}}}

_norm = {"oneOf": [{"enum": ["l1", "l2", "linf"]},
                   {"type": "object", "additionalProperties": False, "required": ["kind", "weights"],
                    "properties": {"kind": {"const": "weighted"},
                                   "weights": {"type": "array", "minItems": 1,
                                               "items": {"type": "number", "exclusiveMinimum": 0}}}}]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "rdslab experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "pipeline"],
    "properties": {
        "system": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "params": {"type": "object"},
                "norm": _norm,
                "custom": {
                    "type": "object", "additionalProperties": False, "required": ["maps"],
                    "properties": {
                        "name": {"type": "string"},
                        "maps": {"type": "array", "minItems": 1,
                                 "items": {"type": "array", "minItems": 1,
                                           "items": {"type": "array", "items": _term}}},
                        "symbol_probs": {"type": "array", "items": {"type": "number", "minimum": 0}},
                        "periodic": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        "domain_radius": {"type": "number", "exclusiveMinimum": 0},
                        "tail_block": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        "initial_state": {"type": "array", "items": {"type": "number"}},
                        "fixed_point": {"type": "array", "items": {"type": "number"}},
                        "norm": _norm,
                    }},
            },
            "oneOf": [{"required": ["name"], "not": {"required": ["custom"]}},
                      {"required": ["custom"], "not": {"required": ["name"]}}],
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "pipeline": {"enum": list(PIPELINES)},
        "budgets": {"type": "object", "additionalProperties": False, "properties": _budget_block},
        "output": {"type": "string", "minLength": 1},
        "criteria": {"type": "array", "items": {"type": "string"}},
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    system: dict
    pipeline: str
    seed: int = 0
    budgets: dict = field(default_factory=dict)
    output: str = "out"
    criteria: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        validate(d)
        budgets = copy.deepcopy(BUDGET_DEFAULTS)
        for k, v in d.get("budgets", {}).items():
            budgets[k].update(v)
        return cls(copy.deepcopy(d["system"]), d["pipeline"], int(d.get("seed", 0)), budgets,
                   d.get("output", "out"), tuple(d.get("criteria", ())))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None

    def to_dict(self) -> dict:
        d = {"system": copy.deepcopy(self.system), "pipeline": self.pipeline, "seed": self.seed,
             "budgets": copy.deepcopy(self.budgets), "output": self.output}
        if self.criteria:
            d["criteria"] = list(self.criteria)
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def budget(self, pipeline: str | None = None) -> dict:
        return dict(self.budgets[pipeline or self.pipeline])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def validate(d) -> None:
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    sysd = d["system"]
    if "name" in sysd:
        from .systems import BUILTINS
        if sysd["name"] not in BUILTINS:
            raise ConfigError(f"system/name: unknown system {sysd['name']!r}")


def build_configured_system(cfg: ExperimentConfig):
    from .systems import build_system, custom_system
    s = cfg.system
    try:
        if "custom" in s:
            spec = dict(s["custom"])
            if "norm" in s:
                spec["norm"] = s["norm"]
            return custom_system(spec, seed=cfg.seed)
        return build_system(s["name"], cfg.seed, s.get("norm"), **s.get("params", {}))
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"system: {e}") from None
