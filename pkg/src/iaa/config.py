"""Run configuration: one JSON document validated against an embedded schema."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .backbone import BackboneConfig
from .trainer import STAGES, TrainStageConfig

_STAGE = {
    "type": "object",
    "required": ["stage", "learning_rate", "steps"],
    "additionalProperties": False,
    "properties": {
        "stage": {"enum": list(STAGES)},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "datasets": {"type": "array", "items": {"enum": ["caption", "instruction", "grounding"]}, "minItems": 1},
        "warmup_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "backbone", "adaptor", "data", "pretrain", "stages"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "backbone": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vocab_size": {"type": "integer", "minimum": 420},
                "d_model": {"type": "integer", "minimum": 2},
                "n_layers": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "ffn_hidden": {"type": "integer", "minimum": 1},
                "max_seq_len": {"type": "integer", "minimum": 8},
                "rope_base": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "adaptor": {
            "type": "object",
            "additionalProperties": False,
            "required": ["variant", "n_insert"],
            "properties": {
                "variant": {"enum": ["A", "B", "C"]},
                "n_insert": {"type": "integer", "minimum": 0},
                "gate_mode": {"enum": ["vector", "scalar", None]},
                "duplicate_io": {"type": "boolean"},
                "patch_size": {"type": "integer", "minimum": 1},
                "feature_width": {"type": "integer", "minimum": 1},
                "encoder_seed": {"type": "integer", "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["text", "caption", "instruction", "grounding"],
            "properties": {k: {"type": "integer", "minimum": 2} for k in ("text", "caption", "instruction", "grounding")},
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "required": ["steps", "learning_rate"],
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "stages": {"type": "array", "items": _STAGE},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer", "minimum": 1} for k in ("caption", "instruction", "grounding", "text")},
        },
        "ablation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "variants": {"type": "array", "items": {"enum": ["A", "B", "C"]}, "minItems": 1},
                "duplicate_io": {"type": "array", "items": {"type": "boolean"}, "minItems": 1},
                "n_insert": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "schedules": {"type": "array", "items": {"enum": ["full", "skip-stage1", "skip-stage2"]}, "minItems": 1},
            },
        },
    },
}

_DEFAULT = {
    "seed": 0,
    "backbone": {
        "vocab_size": 512,
        "d_model": 128,
        "n_layers": 8,
        "n_heads": 4,
        "ffn_hidden": 512,
        "max_seq_len": 256,
        "rope_base": 10000.0,
        "seed": 0,
    },
    "adaptor": {"variant": "C", "n_insert": 2, "gate_mode": None, "duplicate_io": True, "patch_size": 4, "feature_width": 64, "encoder_seed": 1234},
    "data": {"text": 40000, "caption": 6000, "instruction": 6000, "grounding": 8000},
    "pretrain": {"steps": 1200, "learning_rate": 2e-3, "batch_size": 32},
    "stages": [
        {"stage": "Stage1-PT", "learning_rate": 1e-3, "steps": 500, "batch_size": 32, "datasets": ["caption"]},
        {"stage": "Stage2-PT", "learning_rate": 1e-3, "steps": 500, "batch_size": 32, "datasets": ["caption"]},
        {"stage": "Instruction-FT", "learning_rate": 5e-4, "steps": 1000, "batch_size": 32, "datasets": ["instruction", "caption"]},
        {"stage": "Grounding-FT", "learning_rate": 3e-4, "steps": 1500, "batch_size": 32, "datasets": ["grounding"]},
    ],
    "eval": {"caption": 256, "instruction": 256, "grounding": 256, "text": 512},
    "ablation": {
        "seeds": [0, 1, 2],
        "variants": ["A", "B", "C"],
        "duplicate_io": [True, False],
        "n_insert": [1, 2, 4],
        "schedules": ["full", "skip-stage1", "skip-stage2"],
    },
}

_SMOKE = copy.deepcopy(_DEFAULT)
_SMOKE["backbone"].update({"d_model": 32, "n_layers": 4, "n_heads": 2, "ffn_hidden": 128, "max_seq_len": 96})
_SMOKE["data"] = {"text": 1200, "caption": 800, "instruction": 800, "grounding": 800}
_SMOKE["pretrain"] = {"steps": 300, "learning_rate": 3e-3, "batch_size": 32}
_SMOKE["stages"] = [
    {"stage": "Stage1-PT", "learning_rate": 1e-3, "steps": 40, "batch_size": 16, "datasets": ["caption"]},
    {"stage": "Stage2-PT", "learning_rate": 1e-3, "steps": 40, "batch_size": 16, "datasets": ["caption"]},
    {"stage": "Instruction-FT", "learning_rate": 5e-4, "steps": 40, "batch_size": 16, "datasets": ["instruction", "caption"]},
    {"stage": "Grounding-FT", "learning_rate": 3e-4, "steps": 40, "batch_size": 16, "datasets": ["grounding"]},
]
_SMOKE["eval"] = {"caption": 64, "instruction": 64, "grounding": 64, "text": 128}

PRESETS = {"default": _DEFAULT, "smoke": _SMOKE}


class ConfigError(ValueError):
    pass


def preset(name: str = "default") -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    if cfg["adaptor"]["n_insert"] > cfg["backbone"].get("n_layers", 8):
        raise ConfigError("adaptor.n_insert exceeds backbone.n_layers")
    if cfg["adaptor"]["variant"] == "C" and cfg["adaptor"].get("gate_mode") is not None:
        raise ConfigError("variant C has no gates; set adaptor.gate_mode to null")
    try:
        backbone_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"config invalid at backbone: {exc}") from None
    return cfg


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return validate(cfg)


def backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(**cfg["backbone"])


def stage_configs(cfg: dict, seed: int | None = None) -> list[TrainStageConfig]:
    seed = cfg["seed"] if seed is None else seed
    out = []
    for st in cfg["stages"]:
        kw = dict(st)
        if "datasets" in kw:
            kw["datasets"] = tuple(kw["datasets"])
        out.append(TrainStageConfig(seed=seed, **kw))
    return out
