"""Fused differentiable operators used by the encoders and prompt generators."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from uniprompt.autodiff.tensor import Tensor, _make, broadcast_to, concat, matmul, reshape, transpose
from uniprompt.errors import ConfigurationError, DimensionError

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else out + bias


def gelu(x):
    """Gaussian-error linear unit in its tanh form.

    ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``
    """
    x = _tensor(x)
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    x = _tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: last extent {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ConfigurationError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def softmax(x, mask=None):
    """Softmax over the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries receive
    exactly zero probability.  Every row must keep at least one entry.
    """
    x = _tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: needs a nonempty last axis, got shape {x.shape}")
    data = x.data
    if mask is not None:
        data = np.where(mask, data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x):
    x = _tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = _tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def l2_normalize(x, axis=-1):
    x = _tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward)


# weight bundles ------------------------------------------------------------------

@dataclasses.dataclass
class LayerNormWeights:
    gamma: Tensor
    beta: Tensor

    def named(self):
        return {"gamma": self.gamma, "beta": self.beta}


@dataclasses.dataclass
class AttentionWeights:
    """Projection matrices stored (in, out); biases per output unit."""

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


@dataclasses.dataclass
class FeedForwardWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _split_heads(x, heads):
    *lead, s, d = x.shape
    x = reshape(x, (*lead, s, heads, d // heads))
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x):
    *lead, h, s, dh = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, (*lead, s, h * dh))


def multi_head_attention(q, k, v, weights, heads, mask=None, return_weights=False):
    """Scaled dot-product attention over rows of ``(..., s, d)`` inputs.

    Each head uses the scale ``1/sqrt(d/heads)``.  ``mask`` (s_q x s_k booleans,
    True = visible) is shared by all heads.  With ``return_weights`` the
    per-head attention matrices come back as a plain array of shape
    ``(..., heads, s_q, s_k)``.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"attention width {d} is not divisible by heads={heads}")
    for name, t in (("key", k), ("value", v)):
        if t.shape[-1] != d:
            raise DimensionError(f"attention {name} width {t.shape[-1]} != query width {d}")
    qh = _split_heads(linear(q, weights.q_w, weights.q_b), heads)
    kh = _split_heads(linear(k, weights.k_w, weights.k_b), heads)
    vh = _split_heads(linear(v, weights.v_w, weights.v_b), heads)
    scores = matmul(qh, transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(d // heads))
    attn = softmax(scores, mask=mask)
    out = linear(_merge_heads(matmul(attn, vh)), weights.out_w, weights.out_b)
    if return_weights:
        return out, attn.data
    return out


def feed_forward(x, weights):
    """Two affine maps with a GELU in between."""
    d = x.shape[-1]
    hidden = weights.w1.shape[1]
    if (
        weights.w1.shape[0] != d
        or weights.b1.shape != (hidden,)
        or weights.w2.shape != (hidden, d)
        or weights.b2.shape != (d,)
    ):
        raise DimensionError(
            f"feed_forward: input width {d} inconsistent with "
            f"w1 {weights.w1.shape}, w2 {weights.w2.shape}"
        )
    return linear(gelu(linear(x, weights.w1, weights.b1)), weights.w2, weights.b2)


def replace_rows(x, rows, start):
    """Return ``x`` with positions ``start:start+len(rows)`` along axis -2 set to ``rows``.

    ``rows`` of shape (n, d) is broadcast over any leading batch axes of ``x``.
    """
    n = rows.shape[0]
    lead = x.shape[:-2]
    if rows.shape[-1] != x.shape[-1]:
        raise DimensionError(f"prompt width {rows.shape[-1]} != token width {x.shape[-1]}")
    block = broadcast_to(rows, (*lead, n, rows.shape[-1])) if lead else rows
    head = x[..., :start, :]
    tail = x[..., start + n:, :]
    return concat([head, block, tail], axis=-2)


def insert_rows(x, rows, start):
    """Insert ``rows`` before position ``start`` along axis -2 (sequence grows by n)."""
    n = rows.shape[0]
    lead = x.shape[:-2]
    if rows.shape[-1] != x.shape[-1]:
        raise DimensionError(f"prompt width {rows.shape[-1]} != token width {x.shape[-1]}")
    block = broadcast_to(rows, (*lead, n, rows.shape[-1])) if lead else rows
    return concat([x[..., :start, :], block, x[..., start:, :]], axis=-2)
