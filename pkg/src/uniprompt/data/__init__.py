"""Synthetic datasets, manifests, and distribution shifts."""

from uniprompt.data.manifest import generate_synthetic, load_dataset, save_dataset
from uniprompt.data.synthetic import (
    Dataset,
    Split,
    SyntheticSpec,
    check_class_lists,
    class_names_for,
    make_synthetic,
    philox,
    prototypes_for,
    shifted_split,
)

__all__ = [
    "Dataset",
    "Split",
    "SyntheticSpec",
    "check_class_lists",
    "class_names_for",
    "generate_synthetic",
    "load_dataset",
    "make_synthetic",
    "philox",
    "prototypes_for",
    "save_dataset",
    "shifted_split",
]
