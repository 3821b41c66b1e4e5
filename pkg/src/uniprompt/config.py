"""Versioned JSON experiment configuration.

``resolve`` merges a user file over :data:`DEFAULTS`, applies dotted
overrides, derives seed-dependent defaults, and returns a fully explicit
dict that is written next to every output.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

import numpy as np

from uniprompt.data import SyntheticSpec, load_dataset, make_synthetic
from uniprompt.encoder import TextConfig, Tokenizer, VisionConfig, init_backbone
from uniprompt.errors import ConfigurationError
from uniprompt.harness import ALLOWED_SHOTS, EpisodeSpec, TrainConfig
from uniprompt.prompts import StrategyKind, default_hyperparameters

SCHEMA_VERSION = 1
PRECISIONS = {"f32": np.float32, "f64": np.float64}


def _fields(cls, drop=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in drop}


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "precision": "f32",
    "threads": 1,
    "output_dir": "runs/default",
    "dataset": {
        "path": None,
        "synthetic": _fields(SyntheticSpec, drop=("seed",)) | {"seed": None},
    },
    "encoder": {
        "checkpoint": None,
        "seed": None,
        "logit_scale": 100.0,
        "vision": _fields(VisionConfig),
        "text": _fields(TextConfig, drop=("vocab_size",)),
    },
    "strategy": {"kind": "unified", "hyperparameters": {}, "checkpoint": None},
    "strategies": [k.value for k in StrategyKind],
    "strategy_hyperparameters": {},
    "train": _fields(TrainConfig, drop=("seed",)),
    "episode": {"shots": 16, "seed": None},
    "grid": {"shots": list(ALLOWED_SHOTS), "seeds": None},
    "shift": {
        "targets": [
            {"name": "noise_0.5", "kind": "noise", "magnitude": 0.5},
            {"name": "noise_1.0", "kind": "noise", "magnitude": 1.0},
            {"name": "prototype_0.5", "kind": "prototype", "magnitude": 0.5},
        ],
    },
    "variance": {"split": "train", "records": None},
    "attention": {"layer": -1, "images": [0, 1, 2, 3, 4]},
}


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and key not in ("hyperparameters",):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text):
    """``"train.epochs=5"`` -> (["train", "epochs"], 5); values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _nest(keys, value):
    for key in reversed(keys):
        value = {key: value}
    return value


def load_config_file(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return data


def resolve(user=None, overrides=(), **top):
    """Fully explicit config from defaults, a user dict, dotted overrides and top-level values."""
    user = dict(user or {})
    version = user.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema_version {version}; this build reads {SCHEMA_VERSION}")
    cfg = _merge(DEFAULTS, user)
    for text in overrides:
        keys, value = parse_override(text)
        cfg = _merge(cfg, _nest(keys, value))
    cfg = _merge(cfg, {k: v for k, v in top.items() if v is not None})

    seed = int(cfg["seed"])
    if cfg["dataset"]["synthetic"]["seed"] is None:
        cfg["dataset"]["synthetic"]["seed"] = seed
    if cfg["encoder"]["seed"] is None:
        cfg["encoder"]["seed"] = seed
    if cfg["episode"]["seed"] is None:
        cfg["episode"]["seed"] = seed + 1
    if cfg["grid"]["seeds"] is None:
        cfg["grid"]["seeds"] = [seed + 1, seed + 2, seed + 3]

    width = cfg["encoder"]["text"]["width"]
    per_kind = cfg["strategy_hyperparameters"]
    for kind in per_kind:
        default_hyperparameters(kind, width)
    cfg["strategy_hyperparameters"] = {k.value: default_hyperparameters(k, width, per_kind.get(k.value)) for k in StrategyKind}
    kind = cfg["strategy"]["kind"]
    chosen = {**per_kind.get(kind, {}), **cfg["strategy"]["hyperparameters"]}
    cfg["strategy"]["hyperparameters"] = default_hyperparameters(kind, width, chosen)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg["precision"] not in PRECISIONS:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}, got {cfg['precision']!r}")
    if int(cfg["threads"]) < 1:
        raise ConfigurationError("threads must be >= 1")
    for s in [cfg["episode"]["shots"], *cfg["grid"]["shots"]]:
        EpisodeSpec(s, 0).validate()
    if not cfg["grid"]["seeds"]:
        raise ConfigurationError("grid.seeds must not be empty")
    for kind in [cfg["strategy"]["kind"], *cfg["strategies"]]:
        try:
            StrategyKind(kind)
        except ValueError:
            allowed = ", ".join(k.value for k in StrategyKind)
            raise ConfigurationError(f"unknown strategy {kind!r}; expected one of {allowed}") from None
    train_config(cfg).validate()
    synthetic_spec(cfg).validate()
    VisionConfig(**cfg["encoder"]["vision"]).validate()
    for target in cfg["shift"]["targets"]:
        if target.get("kind") not in ("noise", "prototype"):
            raise ConfigurationError(f"shift target {target.get('name')!r} has unknown kind {target.get('kind')!r}")
    return cfg


def dump(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


# builders ----------------------------------------------------------------------

def train_config(cfg, seed=0):
    return TrainConfig(**cfg["train"], seed=seed)


def synthetic_spec(cfg):
    return SyntheticSpec(**cfg["dataset"]["synthetic"])


def dtype(cfg):
    return PRECISIONS[cfg["precision"]]


def build_dataset(cfg):
    path = cfg["dataset"]["path"]
    if path is not None and Path(path).exists():
        return load_dataset(path)
    return make_synthetic(synthetic_spec(cfg))


def build_encoder(cfg, dataset):
    from uniprompt.checkpoint import load_encoder

    enc_cfg = cfg["encoder"]
    if enc_cfg["checkpoint"] is not None:
        return load_encoder(enc_cfg["checkpoint"], dtype=dtype(cfg))
    text = TextConfig(**enc_cfg["text"])
    words = [w for name in dataset.class_names for w in name.split()] if dataset is not None else []
    tokenizer = Tokenizer(context_length=text.context_length, extra_words=words)
    return init_backbone(
        VisionConfig(**enc_cfg["vision"]), text, seed=enc_cfg["seed"], logit_scale=enc_cfg["logit_scale"],
        tokenizer=tokenizer, dtype=dtype(cfg),
    )


__all__ = [
    "DEFAULTS",
    "SCHEMA_VERSION",
    "build_dataset",
    "build_encoder",
    "dump",
    "load_config_file",
    "parse_override",
    "resolve",
    "synthetic_spec",
    "train_config",
    "validate",
]
