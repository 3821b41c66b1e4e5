"""Unified prompt tuning for a frozen dual encoder, on a numpy autodiff core."""

from uniprompt.encoder import DualEncoder, TextConfig, VisionConfig, init_backbone
from uniprompt.harness import TrainConfig, run_cell, run_matrix
from uniprompt.prompts import StrategyKind, forward_logits, make_strategy

__version__ = "0.1.0"

__all__ = [
    "DualEncoder",
    "StrategyKind",
    "TextConfig",
    "TrainConfig",
    "VisionConfig",
    "forward_logits",
    "init_backbone",
    "make_strategy",
    "run_cell",
    "run_matrix",
]
