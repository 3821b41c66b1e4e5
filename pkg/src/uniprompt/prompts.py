"""Prompt-tuning strategies for the frozen dual encoder.

Prompt tensors are stored token-major: a prompt of length ``n`` and width
``d`` is an ``(n, d)`` array whose rows are tokens.  Every strategy exposes
the same surface: ``trainables()`` lists exactly the parameters an optimizer
may touch, and ``generate()`` builds (inside the current autodiff graph) the
text and visual prompt plans that the encoders consume.
"""

from __future__ import annotations

import enum
import inspect

import numpy as np

from uniprompt.autodiff import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    Parameter,
    concat,
    embedding,
    feed_forward,
    gelu,
    layer_norm,
    linear,
    multi_head_attention,
    no_grad,
    reshape,
)
from uniprompt.data.synthetic import philox
from uniprompt.encoder import (
    TEMPLATE_LENGTH,
    TextPromptPlan,
    VisualPromptPlan,
    class_logits,
    insert_visual_prompts,
    text_classifier,
)
from uniprompt.errors import ConfigurationError, DimensionError, LengthError

PROMPT_INIT_STD = 0.02


class StrategyKind(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    TEXT = "text"
    VPT_SHALLOW = "vpt_shallow"
    VPT_DEEP = "vpt_deep"
    JOINT = "joint"
    SHARED = "shared"
    MLP = "mlp"
    UNIFIED = "unified"


TRAINABLE_KINDS = tuple(k for k in StrategyKind if k is not StrategyKind.ZERO_SHOT)


class PromptPlan:
    __slots__ = ("text", "visual")

    def __init__(self, text=None, visual=None):
        self.text = text
        self.visual = visual


# stand-alone prompt operations -----------------------------------------------

def apply_text_prompt(T, class_token_embeddings, context_length=None):
    """Content embeddings ``[t_1, ..., t_m, CLASS]`` for one class name.

    With ``context_length`` the sentinel-inclusive length is validated.
    """
    if T.ndim != 2 or T.shape[0] < 1:
        raise LengthError(f"text prompt must have at least one row, got shape {T.shape}")
    if T.shape[1] != class_token_embeddings.shape[1]:
        raise DimensionError(f"prompt width {T.shape[1]} != embedding width {class_token_embeddings.shape[1]}")
    total = T.shape[0] + class_token_embeddings.shape[0] + 2
    if context_length is not None and total > context_length:
        raise LengthError(f"prompted sequence needs {total} tokens, context_length is {context_length}")
    return concat([T, class_token_embeddings], axis=0)


def upt_transform(U, theta):
    """Lightweight transformer layer applied to unified prompts.

    In the default ``residual_norm="normed_residual"`` form::

        U' = SA(U) + LN1(U)
        U_hat = FFN(LN2(U')) + LN2(U')

    ``residual_norm="prenorm"`` swaps in the standard block
    ``U' = SA(LN1(U)) + U``, ``U_hat = FFN(LN2(U')) + U'`` for comparison.
    ``U`` has shape ``(..., n_u, d_u)``; the output has the same shape.
    """
    if U.shape[-1] != theta.width:
        raise DimensionError(f"unified prompts have width {U.shape[-1]}, transform expects {theta.width}")
    ln1, ln2 = theta.ln1, theta.ln2
    if theta.residual_norm == "normed_residual":
        u1 = multi_head_attention(U, U, U, theta.attn, theta.heads) + layer_norm(U, ln1.gamma, ln1.beta)
        n2 = layer_norm(u1, ln2.gamma, ln2.beta)
        return feed_forward(n2, theta.ffn) + n2
    h = layer_norm(U, ln1.gamma, ln1.beta)
    u1 = multi_head_attention(h, h, h, theta.attn, theta.heads) + U
    return feed_forward(layer_norm(u1, ln2.gamma, ln2.beta), theta.ffn) + u1


def split_unified(U_hat, split_index):
    """Partition prompt rows: the first ``split_index`` go to text, the rest to vision."""
    n_u = U_hat.shape[-2]
    if not 1 <= split_index <= n_u - 1:
        raise ConfigurationError(f"split_index must lie in [1, {n_u - 1}], got {split_index}")
    return U_hat[..., :split_index, :], U_hat[..., split_index:, :]


def mlp_generate(U, mlp, split_index):
    """Two affine layers with a GELU, then the same row split as the unified transform."""
    if U.shape[-1] != mlp.w1.shape[0]:
        raise DimensionError(f"unified prompts have width {U.shape[-1]}, MLP expects {mlp.w1.shape[0]}")
    hidden = mlp.w1.shape[1]
    if mlp.w2.shape[0] != hidden:
        raise DimensionError("MLP weight shapes are inconsistent")
    out = linear(gelu(linear(U, mlp.w1, mlp.b1)), mlp.w2, mlp.b2)
    return split_unified(out, split_index)


def shared_apply(U, text_width, visual_width):
    """Use the same prompt rows verbatim on both sides."""
    width = U.shape[-1]
    if width != text_width or width != visual_width:
        raise ConfigurationError(
            f"shared prompts need equal encoder widths; got prompt {width}, text {text_width}, vision {visual_width}. "
            "Configure the text and vision towers with the same width."
        )
    return U, U


# parameter containers -----------------------------------------------------------

class PromptTransformer:
    """Trainable weights of the unified prompt transform plus per-side projections."""

    def __init__(self, width, heads, attn, ln1, ln2, ffn, text_proj=None, visual_proj=None, residual_norm="normed_residual"):
        if width % heads:
            raise ConfigurationError(f"prompt width {width} is not divisible by heads {heads}")
        if residual_norm not in ("normed_residual", "prenorm"):
            raise ConfigurationError(f"residual_norm must be 'normed_residual' or 'prenorm', got {residual_norm!r}")
        self.width = width
        self.heads = heads
        self.attn = attn
        self.ln1 = ln1
        self.ln2 = ln2
        self.ffn = ffn
        self.text_proj = text_proj
        self.visual_proj = visual_proj
        self.residual_norm = residual_norm

    def named(self):
        out = {}
        for part in ("attn", "ln1", "ln2", "ffn"):
            for name, p in getattr(self, part).named().items():
                out[f"theta.{part}.{name}"] = p
        if self.text_proj is not None:
            out["theta.text_proj"] = self.text_proj
        if self.visual_proj is not None:
            out["theta.visual_proj"] = self.visual_proj
        return out


class _Rng:
    def __init__(self, seed, stream):
        self.gen = philox(seed, 0x9807, stream)

    def normal(self, shape, std):
        return self.gen.standard_normal(shape) * std


def _param(array, name, dtype):
    return Parameter(np.asarray(array, dtype=dtype), trainable=True, name=name)


def _init_attention(rng, width, dtype, prefix):
    attn_std, proj_std = width**-0.5, width**-0.5 * 2**-0.5
    names = ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "out_w", "out_b")
    arrays = []
    for name in names:
        if name.endswith("_b"):
            arrays.append(np.zeros(width))
        else:
            arrays.append(rng.normal((width, width), proj_std if name == "out_w" else attn_std))
    return AttentionWeights(*(_param(a, f"{prefix}.{n}", dtype) for a, n in zip(arrays, names)))


def _init_ffn(rng, width, hidden, dtype, prefix):
    return FeedForwardWeights(
        _param(rng.normal((width, hidden), (2 * width) ** -0.5), f"{prefix}.w1", dtype),
        _param(np.zeros(hidden), f"{prefix}.b1", dtype),
        _param(rng.normal((hidden, width), width**-0.5 * 2**-0.5), f"{prefix}.w2", dtype),
        _param(np.zeros(width), f"{prefix}.b2", dtype),
    )


def _init_ln(width, dtype, prefix):
    return LayerNormWeights(_param(np.ones(width), f"{prefix}.gamma", dtype), _param(np.zeros(width), f"{prefix}.beta", dtype))


def _stack_layers(params):
    return concat([reshape(p, (1, *p.shape)) for p in params], axis=0)


# strategies ------------------------------------------------------------------------

class PromptStrategy:
    """Common surface of all strategies; subclasses fill in ``generate``."""

    kind = None

    def __init__(self, encoder, seed=0, **hparams):
        self.seed = int(seed)
        self.hparams = dict(hparams)
        self.text_width = encoder.text.width
        self.visual_width = encoder.vision.width
        self.layers = encoder.vision.layers
        self.text_layers = encoder.text.layers
        self.dtype = encoder.dtype
        self.params = {}

    def trainables(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    @property
    def text_length(self):
        """Number of prompt slots on the text side, or None for the fixed template."""
        return None

    def generate(self):
        return PromptPlan()

    def descriptor(self):
        return {"kind": self.kind.value, "seed": self.seed, **self.hparams}

    def _add(self, name, array):
        p = _param(array, name, self.dtype)
        self.params[name] = p
        return p

    def _prompt(self, name, rows, width, rng):
        return self._add(name, rng.normal((rows, width), PROMPT_INIT_STD))


class ZeroShot(PromptStrategy):
    kind = StrategyKind.ZERO_SHOT


class TextOnly(PromptStrategy):
    """Learnable context vectors replacing the template words."""

    kind = StrategyKind.TEXT

    def __init__(self, encoder, seed=0, m=4, init="random"):
        super().__init__(encoder, seed, m=m, init=init)
        if m < 1:
            raise LengthError("text prompt length m must be at least 1")
        if init == "template":
            if m != TEMPLATE_LENGTH:
                raise ConfigurationError(f"template initialization needs m={TEMPLATE_LENGTH}")
            tok = encoder.tokenizer
            ids = np.array(tok.word_ids("a photo of a"))
            with no_grad():
                values = embedding(encoder.params["text.token_emb"], ids).data
            self.T = self._add("T", values)
        elif init == "random":
            self.T = self._prompt("T", m, self.text_width, _Rng(seed, 1))
        else:
            raise ConfigurationError(f"unknown text prompt init {init!r}")
        self.m = m

    @property
    def text_length(self):
        return self.m

    def generate(self):
        return PromptPlan(text=TextPromptPlan({0: self.T}))


class VisualPrompts(PromptStrategy):
    """Visual prompt tokens, inserted once (shallow) or refreshed at every layer (deep)."""

    def __init__(self, encoder, seed=0, n=4, depth="deep"):
        super().__init__(encoder, seed, n=n)
        if n < 0:
            raise LengthError("visual prompt length n must be >= 0")
        if depth not in ("shallow", "deep"):
            raise ConfigurationError(f"depth must be 'shallow' or 'deep', got {depth!r}")
        self.n = n
        self.depth = depth
        rng = _Rng(seed, 2)
        layers = [0] if depth == "shallow" else range(self.layers)
        self.V = {i: self._prompt(f"V.{i}", n, self.visual_width, rng) for i in layers}

    def trainables(self):
        return [p for p in self.params.values() if p.size]

    def generate(self):
        return PromptPlan(visual=VisualPromptPlan(dict(self.V), mode=self.depth))


class VptShallow(VisualPrompts):
    kind = StrategyKind.VPT_SHALLOW

    def __init__(self, encoder, seed=0, n=4):
        super().__init__(encoder, seed, n=n, depth="shallow")


class VptDeep(VisualPrompts):
    kind = StrategyKind.VPT_DEEP

    def __init__(self, encoder, seed=0, n=4):
        super().__init__(encoder, seed, n=n, depth="deep")


class Joint(PromptStrategy):
    """Independent text context vectors and deep visual prompts trained with one loss."""

    kind = StrategyKind.JOINT

    def __init__(self, encoder, seed=0, m=4, n=4):
        super().__init__(encoder, seed, m=m, n=n)
        self.m, self.n = m, n
        self.T = self._prompt("T", m, self.text_width, _Rng(seed, 1))
        rng = _Rng(seed, 2)
        self.V = {i: self._prompt(f"V.{i}", n, self.visual_width, rng) for i in range(self.layers)}

    @property
    def text_length(self):
        return self.m

    def generate(self):
        return PromptPlan(text=TextPromptPlan({0: self.T}), visual=VisualPromptPlan(dict(self.V), mode="deep"))


class _LayerwiseUnified(PromptStrategy):
    """Shared machinery for strategies built on per-layer unified prompts ``U^i``."""

    def __init__(self, encoder, seed, n_u, d_u, **hparams):
        super().__init__(encoder, seed, n_u=n_u, **hparams)
        if self.text_layers != self.layers:
            raise ConfigurationError(
                f"layer-wise unified prompts need equal depths; text has {self.text_layers}, vision {self.layers}"
            )
        if n_u < 2:
            raise LengthError("unified prompt length n_u must be at least 2")
        self.n_u = n_u
        self.d_u = d_u
        rng = _Rng(seed, 3)
        self.U = [self._prompt(f"U.{i}", n_u, d_u, rng) for i in range(self.layers)]

    def _plans(self, text_rows, visual_rows):
        text = TextPromptPlan({i: text_rows[i] for i in range(self.layers)})
        visual = VisualPromptPlan({i: visual_rows[i] for i in range(self.layers)}, mode="deep")
        return PromptPlan(text=text, visual=visual)


class Shared(_LayerwiseUnified):
    kind = StrategyKind.SHARED

    def __init__(self, encoder, seed=0, n_u=8):
        if encoder.text.width != encoder.vision.width:
            shared_apply(np.zeros((1, encoder.text.width)), encoder.text.width, encoder.vision.width)
        super().__init__(encoder, seed, n_u, encoder.text.width)

    @property
    def text_length(self):
        return self.n_u

    def generate(self):
        pairs = [shared_apply(u, self.text_width, self.visual_width) for u in self.U]
        return self._plans([t for t, _ in pairs], [v for _, v in pairs])


class _Generated(_LayerwiseUnified):
    """Unified prompts passed through a learned generator, then split and projected."""

    def __init__(self, encoder, seed, n_u, split_index, d_u, **hparams):
        d_u = encoder.text.width if d_u is None else d_u
        split_index = n_u // 2 if split_index is None else split_index
        super().__init__(encoder, seed, n_u, d_u, split_index=split_index, **hparams)
        self.hparams["d_u"] = d_u
        if not 1 <= split_index <= n_u - 1:
            raise ConfigurationError(f"split_index must lie in [1, {n_u - 1}], got {split_index}")
        self.split_index = split_index
        rng = _Rng(seed, 5)
        self.text_proj = None
        self.visual_proj = None
        if d_u != self.text_width:
            self.text_proj = self._add("proj.text", rng.normal((d_u, self.text_width), d_u**-0.5))
        if d_u != self.visual_width:
            self.visual_proj = self._add("proj.visual", rng.normal((d_u, self.visual_width), d_u**-0.5))

    @property
    def text_length(self):
        return self.split_index

    def transform(self, stacked):
        raise NotImplementedError

    def generate(self):
        text_half, visual_half = self.transform(_stack_layers(self.U))
        if self.text_proj is not None:
            text_half = linear(text_half, self.text_proj)
        if self.visual_proj is not None:
            visual_half = linear(visual_half, self.visual_proj)
        return self._plans(
            [text_half[i] for i in range(self.layers)],
            [visual_half[i] for i in range(self.layers)],
        )


class Unified(_Generated):
    """Per-layer unified prompts transformed by one shared lightweight attention layer."""

    kind = StrategyKind.UNIFIED

    def __init__(self, encoder, seed=0, n_u=8, split_index=None, d_u=None, heads=4, residual_norm="normed_residual"):
        super().__init__(encoder, seed, n_u, split_index, d_u, heads=heads, residual_norm=residual_norm)
        rng = _Rng(seed, 4)
        width = self.d_u
        theta = PromptTransformer(
            width,
            heads,
            attn=_init_attention(rng, width, self.dtype, "theta.attn"),
            ln1=_init_ln(width, self.dtype, "theta.ln1"),
            ln2=_init_ln(width, self.dtype, "theta.ln2"),
            ffn=_init_ffn(rng, width, 4 * width, self.dtype, "theta.ffn"),
            text_proj=self.text_proj,
            visual_proj=self.visual_proj,
            residual_norm=residual_norm,
        )
        for name, p in theta.named().items():
            if not name.endswith("_proj"):
                self.params[name] = p
        self.theta = theta

    def transform(self, stacked):
        return split_unified(upt_transform(stacked, self.theta), self.split_index)


class MlpGenerated(_Generated):
    kind = StrategyKind.MLP

    def __init__(self, encoder, seed=0, n_u=8, split_index=None, d_u=None, hidden=None):
        super().__init__(encoder, seed, n_u, split_index, d_u, hidden=hidden)
        hidden = self.d_u if hidden is None else hidden
        rng = _Rng(seed, 6)
        width = self.d_u
        self.mlp = FeedForwardWeights(
            self._add("mlp.w1", rng.normal((width, hidden), width**-0.5)),
            self._add("mlp.b1", np.zeros(hidden)),
            self._add("mlp.w2", rng.normal((hidden, width), hidden**-0.5)),
            self._add("mlp.b2", np.zeros(width)),
        )

    def transform(self, stacked):
        return mlp_generate(stacked, self.mlp, self.split_index)


STRATEGIES = {
    StrategyKind.ZERO_SHOT: ZeroShot,
    StrategyKind.TEXT: TextOnly,
    StrategyKind.VPT_SHALLOW: VptShallow,
    StrategyKind.VPT_DEEP: VptDeep,
    StrategyKind.JOINT: Joint,
    StrategyKind.SHARED: Shared,
    StrategyKind.MLP: MlpGenerated,
    StrategyKind.UNIFIED: Unified,
}


def _kind(kind):
    try:
        return StrategyKind(kind)
    except ValueError:
        allowed = ", ".join(k.value for k in StrategyKind)
        raise ConfigurationError(f"unknown strategy {kind!r}; expected one of {allowed}") from None


def make_strategy(kind, encoder, seed=0, **hparams):
    kind = _kind(kind)
    cls = STRATEGIES[kind]
    try:
        return cls(encoder, seed=seed, **hparams)
    except TypeError as exc:
        raise ConfigurationError(f"bad hyperparameters for {kind.value}: {exc}") from None


def default_hyperparameters(kind, text_width=64, overrides=None):
    """Every hyperparameter of ``kind`` with the derived defaults written out.

    ``d_u`` defaults to the text width, ``split_index`` to ``n_u // 2`` and the
    MLP hidden width to ``d_u``.
    """
    kind = _kind(kind)
    sig = inspect.signature(STRATEGIES[kind].__init__)
    out = {
        name: p.default for name, p in sig.parameters.items()
        if name not in ("self", "encoder", "seed") and p.kind is not p.VAR_KEYWORD
    }
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - set(out))
    if unknown:
        raise ConfigurationError(f"unknown hyperparameters for {kind.value}: {', '.join(unknown)}")
    out.update(overrides)
    if out.get("d_u", 0) is None:
        out["d_u"] = text_width
    if out.get("split_index", 0) is None:
        out["split_index"] = out["n_u"] // 2
    if out.get("hidden", 0) is None:
        out["hidden"] = out["d_u"]
    return out


def strategy_trainables(strategy):
    return strategy.trainables()


def expected_parameter_count(kind, text_width, visual_width, layers, m=4, n=4, n_u=8, d_u=None, hidden=None):
    """Closed-form trainable parameter count of each strategy."""
    kind = StrategyKind(kind)
    d_u = text_width if d_u is None else d_u
    proj = (d_u * text_width if d_u != text_width else 0) + (d_u * visual_width if d_u != visual_width else 0)
    if kind is StrategyKind.ZERO_SHOT:
        return 0
    if kind is StrategyKind.TEXT:
        return m * text_width
    if kind is StrategyKind.VPT_SHALLOW:
        return n * visual_width
    if kind is StrategyKind.VPT_DEEP:
        return layers * n * visual_width
    if kind is StrategyKind.JOINT:
        return m * text_width + layers * n * visual_width
    if kind is StrategyKind.SHARED:
        return layers * n_u * text_width
    if kind is StrategyKind.MLP:
        h = d_u if hidden is None else hidden
        return layers * n_u * d_u + (d_u * h + h + h * d_u + d_u) + proj
    attn = 4 * (d_u * d_u + d_u)
    norms = 2 * 2 * d_u
    ffn = d_u * 4 * d_u + 4 * d_u + 4 * d_u * d_u + d_u
    return layers * n_u * d_u + attn + norms + ffn + proj


# forward helpers ----------------------------------------------------------------

class TextFeatureCache:
    """Memoizes the classifier for strategies whose text side is untrained."""

    def __init__(self):
        self._store = {}

    def get(self, encoder, class_names):
        key = (id(encoder), tuple(class_names))
        if key not in self._store:
            with no_grad():
                self._store[key] = text_classifier(encoder, encoder.template_ids(class_names))
        return self._store[key]


def classifier_for(encoder, strategy, class_names, plan, cache=None):
    if plan.text is None:
        if cache is not None:
            return cache.get(encoder, class_names)
        with no_grad():
            return text_classifier(encoder, encoder.template_ids(class_names))
    ids = encoder.prompted_ids(class_names, strategy.text_length)
    return text_classifier(encoder, ids, plan.text)


def forward_logits(encoder, strategy, images, class_names, plan=None, cache=None):
    """Scaled cosine logits (B, k) for a batch of images under ``strategy``."""
    plan = strategy.generate() if plan is None else plan
    W = classifier_for(encoder, strategy, class_names, plan, cache)
    z = encoder.encode_image(images, plan.visual)
    if z.ndim == 1:
        z = reshape(z, (1, -1))
    return class_logits(z, W, encoder.logit_scale)


def cast_strategy(strategy, dtype):
    """Cast a strategy's trainable tensors in place (for 64-bit gradient checks)."""
    for p in strategy.params.values():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)
    strategy.dtype = np.dtype(dtype).type
    return strategy


__all__ = [
    "PromptPlan",
    "PromptStrategy",
    "PromptTransformer",
    "StrategyKind",
    "TRAINABLE_KINDS",
    "TextFeatureCache",
    "apply_text_prompt",
    "cast_strategy",
    "classifier_for",
    "default_hyperparameters",
    "expected_parameter_count",
    "forward_logits",
    "insert_visual_prompts",
    "make_strategy",
    "mlp_generate",
    "shared_apply",
    "split_unified",
    "strategy_trainables",
    "upt_transform",
]
