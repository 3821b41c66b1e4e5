"""Directory checkpoints for the frozen encoder and for trained strategies.

An encoder checkpoint is ``header.json`` plus one PFTENSOR file per parameter;
a strategy checkpoint is ``strategy.json`` plus one PFTENSOR file per
trainable tensor.  Headers carry SHA-256 digests of every tensor file.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from uniprompt.autodiff import Parameter
from uniprompt.autodiff.io import file_sha256, load_tensor, save_tensor
from uniprompt.encoder import DualEncoder, TextConfig, Tokenizer, VisionConfig
from uniprompt.errors import ConfigurationError, DataError, IntegrityError
from uniprompt.prompts import make_strategy

ENCODER_HEADER = "header.json"
STRATEGY_HEADER = "strategy.json"
FORMAT_VERSION = 1


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint header {path}: {exc}") from exc


def _load_checked(directory, entry):
    path = directory / entry["file"]
    if not path.exists():
        raise DataError(f"checkpoint tensor missing: {path}")
    if file_sha256(path) != entry["sha256"]:
        raise IntegrityError(f"checksum mismatch for {path}")
    array = load_tensor(path)
    if list(array.shape) != list(entry["shape"]):
        raise DataError(f"{path} has shape {array.shape}, header says {entry['shape']}")
    return array


def save_encoder(encoder, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in encoder.named_parameters():
        file = f"{name}.pft"
        entries.append({"name": name, "file": file, "shape": list(p.shape),
                        "sha256": save_tensor(directory / file, p.data)})
    header = {
        "format_version": FORMAT_VERSION,
        "vision": dataclasses.asdict(encoder.vision),
        "text": dataclasses.asdict(encoder.text),
        "vocabulary": list(encoder.tokenizer.words),
        "logit_scale": encoder.logit_scale,
        "dtype": np.dtype(encoder.dtype).name,
        "checksum": encoder.checksum(),
        "parameters": entries,
    }
    _write_json(directory / ENCODER_HEADER, header)
    return directory / ENCODER_HEADER


def load_encoder(directory, dtype=None):
    directory = Path(directory)
    header = _read_json(directory / ENCODER_HEADER)
    vision = VisionConfig(**header["vision"]).validate()
    text = TextConfig(**header["text"]).validate()
    tokenizer = Tokenizer(context_length=text.context_length, words=header["vocabulary"])
    if tokenizer.vocab_size != text.vocab_size:
        raise DataError(f"vocabulary has {tokenizer.vocab_size} words, text config says {text.vocab_size}")
    params = {}
    for entry in header["parameters"]:
        params[entry["name"]] = Parameter(_load_checked(directory, entry), trainable=False, name=entry["name"])
    encoder = DualEncoder(vision, text, tokenizer, params, header["logit_scale"])
    if encoder.checksum() != header["checksum"]:
        raise IntegrityError("encoder checksum does not match the header")
    if dtype is not None and np.dtype(dtype) != np.dtype(encoder.dtype):
        encoder = encoder.astype(dtype)
    return encoder


def save_strategy(strategy, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in sorted(strategy.named_parameters()):
        file = f"{name}.pft"
        entries.append({"name": name, "file": file, "shape": list(p.shape),
                        "sha256": save_tensor(directory / file, p.data)})
    descriptor = strategy.descriptor()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": descriptor.pop("kind"),
        "seed": descriptor.pop("seed"),
        "hyperparameters": descriptor,
        "parameters": entries,
    }
    if extra:
        header["extra"] = extra
    _write_json(directory / STRATEGY_HEADER, header)
    return directory / STRATEGY_HEADER


def load_strategy(directory, encoder):
    directory = Path(directory)
    header = _read_json(directory / STRATEGY_HEADER)
    strategy = make_strategy(header["kind"], encoder, seed=header["seed"], **header["hyperparameters"])
    names = {e["name"] for e in header["parameters"]}
    if names != set(strategy.params):
        raise ConfigurationError(
            f"checkpoint tensors {sorted(names)} do not match strategy parameters {sorted(strategy.params)}"
        )
    for entry in header["parameters"]:
        p = strategy.params[entry["name"]]
        p.data = _load_checked(directory, entry).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
    return strategy


__all__ = ["load_encoder", "load_strategy", "save_encoder", "save_strategy"]
