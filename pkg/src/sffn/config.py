"""Experiment configuration: JSON schema, validation, dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .layers import KINDS, SelectorSpec
from .memory import MemoryGeometry
from .model import ModelConfig
from .optim import AdamConfig
from .selectors import Aggregator
from .training import TrainConfig


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sffn experiment config",
    **_obj({
        "model": _obj({
            "layers": _POS_INT,
            "d": _POS_INT,
            "seq_len": _POS_INT,
            "vocab_size": _POS_INT,
            "d_m": _POS_INT,
            "g": _POS_INT,
            "k": _POS_INT,
            "sffn_layers": {"type": ["array", "null"], "items": _NONNEG_INT},
            "init_std": _POS_NUM,
        }),
        "selector": _obj({
            "kind": {"enum": list(KINDS)},
            "aggregator": {"enum": [a.value for a in Aggregator]},
            "d_l": _POS_INT,
            "batch_norm": {"type": ["boolean", "null"]},
            "sabotage_pct": {"type": "number", "minimum": 0, "maximum": 100},
            "controller": {"enum": ["vanilla", "lowrank"]},
            "aux_weight": {"type": "number", "minimum": 0},
        }),
        "optimizer": _obj({
            "lr": _POS_NUM,
            "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "eps": _POS_NUM,
            "weight_decay": {"type": "number", "minimum": 0},
            "warmup_steps": _NONNEG_INT,
            "end_lr": {"type": "number", "minimum": 0},
            "power": _POS_NUM,
        }),
        "data": _obj({"path": {"type": "string", "minLength": 1}, "val_fraction":
                      {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
        "steps": _NONNEG_INT,
        "batch_size": _POS_INT,
        "eval_interval": _POS_INT,
        "eval_windows": _POS_INT,
        "seed": _NONNEG_INT,
        "out": {"type": "string", "minLength": 1},
        "record_trace": {"type": "boolean"},
    }),
}

DEFAULTS: dict = {
    "model": {"layers": 4, "d": 64, "seq_len": 128, "vocab_size": 256, "d_m": 1024, "g": 1, "k": 256,
              "sffn_layers": None, "init_std": 0.02},
    "selector": {"kind": "dense", "aggregator": "avg", "d_l": 16, "batch_norm": None, "sabotage_pct": 0.0,
                 "controller": "vanilla", "aux_weight": 0.01},
    "optimizer": {"lr": 3e-3, "beta1": 0.9, "beta2": 0.98, "eps": 1e-8, "weight_decay": 0.01,
                  "warmup_steps": 100, "end_lr": 0.0, "power": 1.0},
    "data": {"path": "data/shakespeare.txt", "val_fraction": 0.1},
    "steps": 2000,
    "batch_size": 2,
    "eval_interval": 200,
    "eval_windows": 32,
    "seed": 0,
    "out": "runs/default",
    "record_trace": True,
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one ``path: message`` string per problem."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                           for e in errors])


def merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(token: str) -> tuple[list[str], Any]:
    """``--model.d=64`` -> (["model", "d"], 64).  Values are JSON when they parse as JSON."""
    if not token.startswith("--") or "=" not in token:
        raise ConfigError([f"{token}: overrides must look like --section.key=value"])
    key, _, text = token[2:].partition("=")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key.split("."), value


def apply_overrides(raw: dict, tokens: list[str]) -> dict:
    out = copy.deepcopy(raw)
    for token in tokens:
        path, value = parse_override(token)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{'.'.join(path)}: {part} is not a section"])
        node[path[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, user: dict, overrides: list[str] | None = None) -> "ExperimentConfig":
        raw = apply_overrides(user, overrides or [])
        validate(raw)
        full = merge(DEFAULTS, raw)
        validate(full)
        cfg = cls(full)
        try:
            cfg.model_config()
        except ValueError as exc:
            raise ConfigError([f"model: {exc}"]) from exc
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"<file>: config file not found: {path}"])
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: {path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
        if not isinstance(user, dict):
            raise ConfigError(["<root>: config must be a JSON object"])
        return cls.from_dict(user, overrides)

    def model_config(self) -> ModelConfig:
        m, s = self.raw["model"], self.raw["selector"]
        spec = SelectorSpec(kind=s["kind"], aggregator=s["aggregator"], d_l=s["d_l"], batch_norm=s["batch_norm"],
                            sabotage_pct=s["sabotage_pct"], controller=s["controller"], aux_weight=s["aux_weight"])
        geometry = MemoryGeometry(m["d"], m["d_m"], m["g"], m["k"])
        return ModelConfig(layers=m["layers"], d=m["d"], seq_len=m["seq_len"], vocab_size=m["vocab_size"],
                           geometry=geometry, selector=spec, sffn_layer_indices=m["sffn_layers"],
                           init_std=m["init_std"])

    def train_config(self) -> TrainConfig:
        o = self.raw["optimizer"]
        optim = AdamConfig(lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"],
                           weight_decay=o["weight_decay"], warmup_steps=o["warmup_steps"],
                           end_lr=o["end_lr"], power=o["power"])
        return TrainConfig(steps=self.raw["steps"], batch_size=self.raw["batch_size"],
                           eval_interval=self.raw["eval_interval"], eval_windows=self.raw["eval_windows"],
                           val_fraction=self.raw["data"]["val_fraction"], seed=self.raw["seed"], optim=optim)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()
