"""Run configuration: one JSON document with model, train, analysis and io sections.

The document is validated against :data:`RUN_CONFIG_SCHEMA` before anything
else happens; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import jsonschema

from .model import ModelConfig
from .neurons import MODES, RESET_RULES
from .train import ENCODER_MODES, TASKS, TrainConfig, toy_model_config

SCHEMA_VERSION = 1
ANALYSIS_KINDS = ("firing", "isometry", "energy")

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_unit = {"type": "number", "minimum": 0, "maximum": 1}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_layers": _pos_int, "d_model": _pos_int, "n_heads": _pos_int, "d_ff": _pos_int,
                "T": _pos_int, "vocab": _pos_int,
                "n_classes": {"oneOf": [{"type": "integer", "minimum": 2}, {"type": "null"}]},
                "max_len": _pos_int,
                "linear_mode": {"enum": list(MODES)}, "kv_mode": {"enum": list(MODES)},
                "k": _pos_num, "calibrate": {"type": "boolean"},
                "beta_linear": _unit, "beta_kv": _unit,
                "theta": _pos_num, "sg_alpha": _pos_num, "v_reset": {"type": "number"},
                "reset_rule": {"enum": list(RESET_RULES)},
                "init_std": {"oneOf": [_pos_num, {"type": "null"}]},
                "relaxed": {"type": "boolean"}, "seed": _nonneg_int,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "task": {"enum": list(TASKS)},
                "steps": _pos_int, "batch_size": _pos_int, "peak_lr": _pos_num,
                "warmup_steps": _nonneg_int, "weight_decay": {"type": "number", "minimum": 0},
                "seed": _nonneg_int,
                "encoder_mode": {"oneOf": [{"enum": list(ENCODER_MODES)}, {"type": "null"}]},
                "eval_every": _pos_int, "grad_clip": _pos_num, "seq_len": _pos_int,
                "n_train": _pos_int, "n_val": _pos_int,
                "text_path": {"type": ["string", "null"]},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kinds": {"type": "array", "items": {"enum": list(ANALYSIS_KINDS)}, "uniqueItems": True},
                "sample_size": _pos_int,
                "relu_p": _unit,
                "k": {"oneOf": [_pos_num, {"type": "null"}]},
            },
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checkpoint": {"type": "string", "minLength": 1},
                "metrics": {"type": "string", "minLength": 1},
                "checkpoint_every_eval": {"type": "boolean"},
                "keep_checkpoints": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class AnalysisConfig:
    kinds: list[str] = field(default_factory=list)
    sample_size: int = 64
    relu_p: float = 0.5
    k: float | None = None


@dataclass
class IOConfig:
    checkpoint: str = "checkpoint.splm"
    metrics: str = "metrics.csv"
    checkpoint_every_eval: bool = True
    keep_checkpoints: bool = False  # also write step-stamped copies at each eval

    def stamped(self, step: int) -> str:
        stem, dot, ext = self.checkpoint.rpartition(".")
        return f"{stem}.step{step:06d}.{ext}" if dot else f"{self.checkpoint}.step{step:06d}"


@dataclass
class RunConfig:
    train: TrainConfig
    analysis: AnalysisConfig
    io: IOConfig
    raw: dict

    @property
    def model(self) -> ModelConfig:
        return self.train.model


def validate(doc) -> None:
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(".".join(str(p) for p in err.absolute_path), err.message)


def _build(cls, section: str, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def parse_run_config(doc, base_dir: str | None = None) -> RunConfig:
    """Validate ``doc`` and build typed configs.  Relative paths resolve against ``base_dir``."""
    validate(doc)
    model = _build(lambda **kw: replace(toy_model_config(), **kw), "model", doc.get("model", {}))
    train_vals = dict(doc.get("train", {}))
    if train_vals.get("text_path") and base_dir and not os.path.isabs(train_vals["text_path"]):
        train_vals["text_path"] = os.path.join(base_dir, train_vals["text_path"])
    train = _build(TrainConfig, "train", train_vals, model=model)
    if train.task == "char_lm" and not train.text_path:
        raise ConfigError("train.text_path", "char_lm needs a text corpus path")
    analysis = _build(AnalysisConfig, "analysis", doc.get("analysis", {}))
    io = _build(IOConfig, "io", doc.get("io", {}))
    for name in ("checkpoint", "metrics"):
        v = getattr(io, name)
        if os.path.basename(v) != v:
            raise ConfigError(f"io.{name}", f"must be a bare file name inside the output dir, got {v!r}")
    return RunConfig(train, analysis, io, doc)


def load_run_config(path) -> RunConfig:
    """Read and validate a JSON run config.  OSError propagates; bad JSON is a ConfigError."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_run_config(doc, os.path.dirname(os.path.abspath(path)))


def check_dataset_fields(cfg: RunConfig, vocab: int, n_classes: int | None) -> None:
    """Explicit model.vocab / model.n_classes must agree with the task."""
    given = cfg.raw.get("model", {})
    if "vocab" in given and given["vocab"] != vocab:
        raise ConfigError("model.vocab", f"task {cfg.train.task} has vocabulary {vocab}, config says {given['vocab']}")
    if "n_classes" in given and given["n_classes"] != n_classes:
        raise ConfigError("model.n_classes",
                          f"task {cfg.train.task} has n_classes {n_classes}, config says {given['n_classes']}")

