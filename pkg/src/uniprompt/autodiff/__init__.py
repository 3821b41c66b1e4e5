"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from uniprompt.autodiff.functional import (
    LN_EPS,
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    cross_entropy,
    feed_forward,
    gelu,
    insert_rows,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    multi_head_attention,
    replace_rows,
    softmax,
)
from uniprompt.autodiff.tensor import (
    Parameter,
    Tensor,
    backward,
    broadcast_to,
    concat,
    embedding,
    get_default_dtype,
    matmul,
    no_grad,
    precision,
    reshape,
    set_default_dtype,
    transpose,
)

__all__ = [
    "LN_EPS",
    "AttentionWeights",
    "FeedForwardWeights",
    "LayerNormWeights",
    "Parameter",
    "Tensor",
    "backward",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "embedding",
    "feed_forward",
    "gelu",
    "get_default_dtype",
    "insert_rows",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log_softmax",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "precision",
    "replace_rows",
    "reshape",
    "set_default_dtype",
    "softmax",
    "transpose",
]
