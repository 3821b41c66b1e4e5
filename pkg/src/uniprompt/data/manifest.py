"""On-disk dataset layout: a JSON manifest plus PFTENSOR payloads."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from uniprompt.autodiff.io import file_sha256, load_tensor, save_tensor
from uniprompt.data.synthetic import Dataset, Split, make_synthetic
from uniprompt.errors import DataError, IntegrityError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def save_dataset(dataset, directory):
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {directory}: {exc}") from exc
    splits = {}
    for split_name, split in dataset.splits.items():
        images_file = f"{split_name}_images.pft"
        labels_file = f"{split_name}_labels.pft"
        splits[split_name] = {
            "images": images_file,
            "labels": labels_file,
            "count": len(split),
            "images_sha256": save_tensor(directory / images_file, split.images),
            "labels_sha256": save_tensor(directory / labels_file, split.labels.astype(np.float64)),
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "name": dataset.name,
        "class_names": list(dataset.class_names),
        "image_shape": list(dataset.image_shape),
        "splits": splits,
        "generator": dataset.generator,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def generate_synthetic(spec, directory):
    """Generate ``spec`` and write it under ``directory``; returns the manifest dict."""
    path = save_dataset(make_synthetic(spec), directory)
    return json.loads(path.read_text())


def load_dataset(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {os.fspath(path)}: {exc}") from exc
    root = path.parent
    class_names = manifest["class_names"]
    k = len(class_names)
    image_shape = tuple(manifest["image_shape"])
    splits = {}
    for split_name, entry in manifest["splits"].items():
        arrays = {}
        for field in ("images", "labels"):
            file = root / entry[field]
            if not file.exists():
                raise DataError(f"{split_name} {field} file missing: {file}")
            if file_sha256(file) != entry[f"{field}_sha256"]:
                raise IntegrityError(f"checksum mismatch for {file}")
            arrays[field] = load_tensor(file)
        images, labels = arrays["images"], arrays["labels"]
        if images.shape[1:] != image_shape or images.shape[0] != entry["count"]:
            raise DataError(f"{split_name} images have shape {images.shape}, manifest says {entry['count']} x {image_shape}")
        if labels.shape != (entry["count"],):
            raise DataError(f"{split_name} label count {labels.shape} != image count {entry['count']}")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"{split_name} labels out of range for k={k}")
        splits[split_name] = Split(images, labels)
    return Dataset(manifest["name"], class_names, splits, manifest.get("generator"))
