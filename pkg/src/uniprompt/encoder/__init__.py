"""Frozen miniature CLIP-style dual encoder."""

from uniprompt.encoder.model import (
    DEFAULT_LOGIT_SCALE,
    ClassifierMatrix,
    DualEncoder,
    TextConfig,
    TextPromptPlan,
    VisionConfig,
    VisualPromptPlan,
    class_logits,
    cosine_classify,
    init_backbone,
    insert_visual_prompts,
    text_classifier,
)
from uniprompt.encoder.tokenizer import TEMPLATE, TEMPLATE_LENGTH, Tokenizer

__all__ = [
    "DEFAULT_LOGIT_SCALE",
    "TEMPLATE",
    "TEMPLATE_LENGTH",
    "ClassifierMatrix",
    "DualEncoder",
    "TextConfig",
    "TextPromptPlan",
    "Tokenizer",
    "VisionConfig",
    "VisualPromptPlan",
    "class_logits",
    "cosine_classify",
    "init_backbone",
    "insert_visual_prompts",
    "text_classifier",
]
