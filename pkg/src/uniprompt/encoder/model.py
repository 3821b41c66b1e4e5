"""A small frozen CLIP-style dual encoder built on the autodiff core."""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from uniprompt.autodiff import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    Parameter,
    Tensor,
    broadcast_to,
    concat,
    embedding,
    feed_forward,
    insert_rows,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    multi_head_attention,
    no_grad,
    replace_rows,
    reshape,
    softmax,
    transpose,
)
from uniprompt.encoder.tokenizer import Tokenizer
from uniprompt.errors import ConfigurationError, DimensionError

DEFAULT_LOGIT_SCALE = 100.0


@dataclasses.dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    layers: int = 4
    width: int = 64
    heads: int = 4
    joint_dim: int = 32
    mlp_ratio: int = 4

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigurationError(f"vision width {self.width} is not divisible by heads {self.heads}")
        if min(self.layers, self.width, self.heads, self.joint_dim, self.channels) < 1:
            raise ConfigurationError("vision config extents must be positive")
        return self

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid**2


@dataclasses.dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 0
    context_length: int = 16
    layers: int = 4
    width: int = 64
    heads: int = 4
    joint_dim: int = 32
    mlp_ratio: int = 4

    def validate(self):
        if self.width % self.heads:
            raise ConfigurationError(f"text width {self.width} is not divisible by heads {self.heads}")
        if min(self.layers, self.width, self.heads, self.joint_dim, self.context_length) < 1:
            raise ConfigurationError("text config extents must be positive")
        if self.vocab_size < 5:
            raise ConfigurationError(f"vocab_size {self.vocab_size} too small")
        return self


@dataclasses.dataclass
class Block:
    """Pre-norm transformer block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""

    ln1: LayerNormWeights
    attn: AttentionWeights
    ln2: LayerNormWeights
    ffn: FeedForwardWeights
    heads: int

    def __call__(self, x, mask=None, return_weights=False):
        width = self.ln1.gamma.shape[0]
        if x.shape[-1] != width:
            raise DimensionError(f"block expects token width {width}, got {x.shape[-1]}")
        h = layer_norm(x, self.ln1.gamma, self.ln1.beta)
        attn_out = multi_head_attention(h, h, h, self.attn, self.heads, mask=mask, return_weights=return_weights)
        if return_weights:
            attn_out, weights = attn_out
        x = x + attn_out
        x = x + feed_forward(layer_norm(x, self.ln2.gamma, self.ln2.beta), self.ffn)
        return (x, weights) if return_weights else x

    def named(self, prefix):
        out = {}
        for part in ("ln1", "attn", "ln2", "ffn"):
            for name, p in getattr(self, part).named().items():
                out[f"{prefix}.{part}.{name}"] = p
        return out


@dataclasses.dataclass
class ClassifierMatrix:
    """Unit-norm class embeddings stored as columns of a (d, k) matrix."""

    W: np.ndarray
    class_names: list

    @property
    def k(self):
        return self.W.shape[1]


@dataclasses.dataclass
class VisualPromptPlan:
    """Per-layer visual prompt rows keyed by 0-based block index.

    ``shallow`` plans hold only block 0; their prompt outputs flow on through
    later blocks.  ``deep`` plans hold every block and overwrite the prompt
    positions before each block.
    """

    prompts: dict
    mode: str = "deep"

    @property
    def length(self):
        return next(iter(self.prompts.values())).shape[0] if self.prompts else 0


@dataclasses.dataclass
class TextPromptPlan:
    """Per-layer text prompt rows; key 0 replaces word embeddings, key i>0 hidden states before block i."""

    prompts: dict

    @property
    def length(self):
        return next(iter(self.prompts.values())).shape[0]


def insert_visual_prompts(tokens, prompts, present=0):
    """Layer input ``[c; V; Z]`` from tokens ``[c; (old prompts); Z]``.

    With ``present == 0`` the ``n`` prompt rows are inserted after the class
    token; otherwise the ``present`` rows already at those positions (outputs
    of the previous layer) are discarded and replaced, which requires equal
    lengths.
    """
    n = prompts.shape[0]
    if present and present != n:
        raise ConfigurationError(f"cannot replace {present} prompt positions with {n} prompts")
    if n == 0:
        return tokens
    return replace_rows(tokens, prompts, 1) if present else insert_rows(tokens, prompts, 1)


def text_classifier(encoder, ids, prompts=None):
    """Classifier matrix (d, k) as a tensor: transposed text features."""
    return transpose(encoder.encode_text(ids, prompts), (1, 0))


class _Init:
    def __init__(self, seed):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def normal(self, shape, std):
        return self.rng.standard_normal(shape) * std


def _block(init, width, heads, layers, mlp_ratio):
    attn_std = width**-0.5
    proj_std = width**-0.5 * (2 * layers) ** -0.5
    fc_std = (2 * width) ** -0.5
    hidden = mlp_ratio * width
    frozen = lambda a: Parameter(a, trainable=False, dtype=np.float64)  # noqa: E731
    return Block(
        ln1=LayerNormWeights(frozen(np.ones(width)), frozen(np.zeros(width))),
        attn=AttentionWeights(
            frozen(init.normal((width, width), attn_std)), frozen(np.zeros(width)),
            frozen(init.normal((width, width), attn_std)), frozen(np.zeros(width)),
            frozen(init.normal((width, width), attn_std)), frozen(np.zeros(width)),
            frozen(init.normal((width, width), proj_std)), frozen(np.zeros(width)),
        ),
        ln2=LayerNormWeights(frozen(np.ones(width)), frozen(np.zeros(width))),
        ffn=FeedForwardWeights(
            frozen(init.normal((width, hidden), fc_std)), frozen(np.zeros(hidden)),
            frozen(init.normal((hidden, width), proj_std)), frozen(np.zeros(width)),
        ),
        heads=heads,
    )


class DualEncoder:
    """Frozen image encoder, frozen text encoder, and a logit scale.

    Both ``encode_image`` and ``encode_text`` return L2-normalized joint-space
    vectors, so the classifier's cosine similarity is a dot product.
    """

    def __init__(self, vision, text, tokenizer, params, logit_scale=DEFAULT_LOGIT_SCALE):
        self.vision = vision
        self.text = text
        self.tokenizer = tokenizer
        self.params = params
        self.logit_scale = float(logit_scale)
        self.vision_blocks = [self._block("vision", i, vision.heads) for i in range(vision.layers)]
        self.text_blocks = [self._block("text", i, text.heads) for i in range(text.layers)]
        n = text.context_length
        self.causal_mask = np.tril(np.ones((n, n), dtype=bool))

    def _block(self, tower, i, heads):
        p = lambda name: self.params[f"{tower}.blocks.{i}.{name}"]  # noqa: E731
        return Block(
            ln1=LayerNormWeights(p("ln1.gamma"), p("ln1.beta")),
            attn=AttentionWeights(*(p(f"attn.{n}") for n in ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "out_w", "out_b"))),
            ln2=LayerNormWeights(p("ln2.gamma"), p("ln2.beta")),
            ffn=FeedForwardWeights(p("ffn.w1"), p("ffn.b1"), p("ffn.w2"), p("ffn.b2")),
            heads=heads,
        )

    @property
    def dtype(self):
        return self.params["vision.proj"].dtype

    def astype(self, dtype):
        params = {name: p.astype(dtype) for name, p in self.params.items()}
        return DualEncoder(self.vision, self.text, self.tokenizer, params, self.logit_scale)

    def named_parameters(self):
        return sorted(self.params.items())

    def checksum(self):
        """SHA-256 over every backbone tensor (name, shape, dtype and bytes)."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(str(p.shape).encode() + str(p.dtype).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # image tower ------------------------------------------------------------------
    def _as_batch(self, images):
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        single = images.ndim == 3
        if single:
            images = images[None]
        cfg = self.vision
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(
                f"expected image(s) of shape ({cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
                f"got {images.shape}"
            )
        return images.astype(self.dtype, copy=False), single

    def patchify(self, images):
        b = images.shape[0]
        p, g, c = self.vision.patch_size, self.vision.grid, self.vision.channels
        x = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * c)

    def patch_embed(self, images):
        """Tokens ``[c; Z]`` of shape (B, 1 + s, d_v) (or (1 + s, d_v) for one image)."""
        images, single = self._as_batch(images)
        P = self.params
        patches = linear(Tensor(self.patchify(images)), P["vision.patch_w"], P["vision.patch_b"])
        pos = P["vision.pos"]
        tokens = patches + pos[1:]
        cls = P["vision.cls"] + pos[0]
        cls = broadcast_to(reshape(cls, (1, 1, -1)), (images.shape[0], 1, self.vision.width))
        out = concat([cls, tokens], axis=1)
        return out[0] if single else out

    def vit_layer_forward(self, i, tokens, return_weights=False):
        if not 0 <= i < self.vision.layers:
            raise ConfigurationError(f"vision layer index {i} out of range [0, {self.vision.layers})")
        if tokens.shape[-1] != self.vision.width:
            raise DimensionError(f"vision layer expects width {self.vision.width}, got {tokens.shape[-1]}")
        return self.vision_blocks[i](tokens, return_weights=return_weights)

    def _check_visual_plan(self, plan):
        layers = self.vision.layers
        keys = set(plan.prompts)
        if any(not 0 <= k < layers for k in keys):
            raise ConfigurationError(f"visual prompt plan has layers {sorted(keys)} but encoder has {layers}")
        if plan.mode == "shallow" and keys != {0}:
            raise ConfigurationError("shallow visual prompts must be given for layer 0 only")
        if plan.mode == "deep" and keys != set(range(layers)):
            missing = sorted(set(range(layers)) - keys)
            raise ConfigurationError(f"deep visual prompts missing for layers {missing}")
        lengths = {v.shape[0] for v in plan.prompts.values()}
        if len(lengths) > 1:
            raise ConfigurationError(f"visual prompt lengths differ across layers: {sorted(lengths)}")
        for i, v in plan.prompts.items():
            if v.ndim != 2 or v.shape[1] != self.vision.width:
                raise DimensionError(f"visual prompt for layer {i} has shape {v.shape}, width must be {self.vision.width}")

    def image_tokens(self, images, plan=None, capture=None):
        """Run the image tower and return the final token sequence.

        ``capture`` (a list) receives ``(layer_input_array, attention_weights)``
        per block when given.
        """
        x = self.patch_embed(images)
        n_prompts = 0
        if plan is not None:
            self._check_visual_plan(plan)
            if plan.length == 0:
                plan = None
        for i, block in enumerate(self.vision_blocks):
            if plan is not None and i in plan.prompts:
                v = plan.prompts[i]
                x = insert_visual_prompts(x, v, present=n_prompts)
                n_prompts = v.shape[0]
            if capture is not None:
                layer_input = x.data.copy()
                x, weights = block(x, return_weights=True)
                capture.append((layer_input, weights))
            else:
                x = block(x)
        return x

    def encode_image(self, images, plan=None, capture=None):
        x = self.image_tokens(images, plan, capture)
        P = self.params
        cls = x[..., 0, :]
        cls = layer_norm(cls, P["vision.ln_post.gamma"], P["vision.ln_post.beta"])
        return l2_normalize(linear(cls, P["vision.proj"]))

    # text tower -------------------------------------------------------------------
    def _text_plan(self, prompts):
        if prompts is None:
            return {}
        if isinstance(prompts, TextPromptPlan):
            prompts = prompts.prompts
        elif not isinstance(prompts, dict):
            prompts = {0: prompts}
        for i, t in prompts.items():
            if not 0 <= i < self.text.layers:
                raise ConfigurationError(f"text prompt layer {i} out of range [0, {self.text.layers})")
            if t.ndim != 2 or t.shape[1] != self.text.width:
                raise DimensionError(f"text prompt has shape {t.shape}; width must be {self.text.width}")
        return prompts

    def encode_text(self, ids, prompts=None):
        """Joint-space text features read at the EOS position.

        ``prompts`` may be a (m, d_t) tensor replacing the m word embeddings
        after BOS, or a :class:`TextPromptPlan` with per-layer replacements.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        ids = np.atleast_2d(ids)
        if ids.shape[1] != self.text.context_length:
            raise DimensionError(f"token ids have length {ids.shape[1]}, context_length is {self.text.context_length}")
        plan = self._text_plan(prompts)
        P = self.params
        x = embedding(P["text.token_emb"], ids)
        if 0 in plan:
            x = replace_rows(x, plan[0], 1)
        x = x + P["text.pos"]
        for i, block in enumerate(self.text_blocks):
            if i > 0 and i in plan:
                x = replace_rows(x, plan[i], 1)
            x = block(x, mask=self.causal_mask)
        eos = self.tokenizer.eos_positions(ids)
        feats = x[np.arange(ids.shape[0]), eos]
        feats = layer_norm(feats, P["text.ln_final.gamma"], P["text.ln_final.beta"])
        out = l2_normalize(linear(feats, P["text.proj"]))
        return out[0] if single else out

    def template_ids(self, class_names):
        return np.stack([self.tokenizer.encode_template(name) for name in class_names])

    def prompted_ids(self, class_names, prompt_length):
        return np.stack([self.tokenizer.encode_prompted(name, prompt_length) for name in class_names])

    def build_zero_shot_classifier(self, class_names):
        class_names = list(class_names)
        if not class_names:
            raise ConfigurationError("zero-shot classifier needs at least one class")
        with no_grad():
            W = text_classifier(self, self.template_ids(class_names))
        return ClassifierMatrix(W=W.data, class_names=class_names)


def init_backbone(vision_cfg, text_cfg, seed=0, logit_scale=DEFAULT_LOGIT_SCALE, tokenizer=None, dtype=np.float32):
    """Deterministically initialize a frozen dual encoder.

    Weights follow CLIP's scaled-normal scheme: embeddings use std 0.02
    (text positions 0.01), attention/FFN matrices are scaled by width and
    depth.  Every parameter is frozen.
    """
    if tokenizer is None:
        tokenizer = Tokenizer(context_length=text_cfg.context_length)
    if text_cfg.vocab_size == 0:
        text_cfg = dataclasses.replace(text_cfg, vocab_size=tokenizer.vocab_size)
    if text_cfg.vocab_size != tokenizer.vocab_size or text_cfg.context_length != tokenizer.context_length:
        raise ConfigurationError("text config does not match tokenizer vocabulary/context length")
    vision_cfg.validate()
    text_cfg.validate()
    if logit_scale <= 0:
        raise ConfigurationError("logit_scale must be positive")

    init = _Init(seed)
    frozen = lambda a: Parameter(a, trainable=False, dtype=np.float64)  # noqa: E731
    params = {}
    v, t = vision_cfg, text_cfg
    patch_dim = v.patch_size * v.patch_size * v.channels
    params["vision.patch_w"] = frozen(init.normal((patch_dim, v.width), patch_dim**-0.5))
    params["vision.patch_b"] = frozen(init.normal(v.width, 0.02))
    params["vision.cls"] = frozen(init.normal(v.width, v.width**-0.5))
    params["vision.pos"] = frozen(init.normal((v.num_patches + 1, v.width), v.width**-0.5))
    for i in range(v.layers):
        params.update(_block(init, v.width, v.heads, v.layers, v.mlp_ratio).named(f"vision.blocks.{i}"))
    params["vision.ln_post.gamma"] = frozen(np.ones(v.width))
    params["vision.ln_post.beta"] = frozen(np.zeros(v.width))
    params["vision.proj"] = frozen(init.normal((v.width, v.joint_dim), v.width**-0.5))

    params["text.token_emb"] = frozen(init.normal((t.vocab_size, t.width), 0.02))
    params["text.pos"] = frozen(init.normal((t.context_length, t.width), 0.01))
    for i in range(t.layers):
        params.update(_block(init, t.width, t.heads, t.layers, t.mlp_ratio).named(f"text.blocks.{i}"))
    params["text.ln_final.gamma"] = frozen(np.ones(t.width))
    params["text.ln_final.beta"] = frozen(np.zeros(t.width))
    params["text.proj"] = frozen(init.normal((t.width, t.joint_dim), t.width**-0.5))

    for name, p in params.items():
        p.name = name
    if vision_cfg.joint_dim != text_cfg.joint_dim:
        raise ConfigurationError("vision and text joint_dim must match")
    encoder = DualEncoder(vision_cfg, text_cfg, tokenizer, params, logit_scale)
    return encoder if dtype == np.float64 else encoder.astype(dtype)


def class_logits(z, W, logit_scale):
    """``logit_scale * z @ W`` for features ``z`` (B, d) and classifier ``W`` (d, k)."""
    if z.shape[-1] != W.shape[0]:
        raise DimensionError(f"feature dim {z.shape[-1]} does not match classifier {W.shape}")
    return matmul(z if isinstance(z, Tensor) else Tensor(z), W if isinstance(W, Tensor) else Tensor(W)) * logit_scale


def cosine_classify(z, W, logit_scale=DEFAULT_LOGIT_SCALE):
    """Class probabilities ``softmax(logit_scale * cos(w_i, z))``."""
    W = W.W if isinstance(W, ClassifierMatrix) else W
    z = z if isinstance(z, Tensor) else Tensor(z)
    single = z.ndim == 1
    if single:
        z = reshape(z, (1, -1))
    probs = softmax(class_logits(z, W, logit_scale))
    return probs[0] if single else probs
