# Prompt strategies on the frozen encoder
#
# zero_shot   the fixed template, nothing trained
# text        m learnable context vectors replace the template words
# vpt_*       n learnable visual tokens after the class token (first block or every block)
# joint       text and deep visual prompts, trained independently
# shared      one prompt set per layer used verbatim by both towers
# mlp         per-layer unified prompts through a small MLP, then split
# unified     per-layer unified prompts through one attention layer, then split

# %%
import numpy as np

from uniprompt.autodiff import no_grad
from uniprompt.encoder import TextConfig, VisionConfig, init_backbone
from uniprompt.prompts import StrategyKind, expected_parameter_count, forward_logits, make_strategy

enc = init_backbone(VisionConfig(), TextConfig(), seed=0)

for kind in StrategyKind:
    s = make_strategy(kind, enc, seed=1)
    closed = expected_parameter_count(kind, 64, 64, 4)
    print(f"{kind.value:12s} trainable {s.parameter_count():6d} (closed form {closed})")

# %% what the unified strategy hands to each tower
s = make_strategy("unified", enc, seed=1)
plan = s.generate()
print("text prompts per layer  ", {i: t.shape for i, t in plan.text.prompts.items()})
print("visual prompts per layer", {i: v.shape for i, v in plan.visual.prompts.items()})

# %% a smaller unified width adds per-side projections
small = make_strategy("unified", enc, seed=1, d_u=32)
print("d_u=32:", small.parameter_count(), "parameters, has", [n for n in small.params if n.startswith("proj")])

# %% untrained text prompts built from the template words reproduce zero-shot exactly
images = np.random.default_rng(0).normal(size=(4, 32, 32, 1)).astype(np.float32)
names = ["owl", "harp", "lake"]
with no_grad():
    a = forward_logits(enc, make_strategy("zero_shot", enc), images, names).data
    b = forward_logits(enc, make_strategy("text", enc, init="template"), images, names).data
print("template init == zero-shot:", a.tobytes() == b.tobytes())
