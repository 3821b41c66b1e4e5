# A tiny CLIP-style dual encoder and zero-shot classification
#
# Image tower: 32x32 single-channel images, 8x8 patches, a class token, four
# pre-norm blocks.  Text tower: "a photo of a {name}" with a causal mask, read
# out at the EOS token.  Both project to a shared 32-d sphere and the class
# score is 100 * cosine.

# %%
import numpy as np

from uniprompt.autodiff import no_grad
from uniprompt.data import SyntheticSpec, make_synthetic
from uniprompt.encoder import TextConfig, VisionConfig, cosine_classify, init_backbone

enc = init_backbone(VisionConfig(), TextConfig(), seed=0)
print("backbone checksum", enc.checksum()[:16], "...")

# %% the text side builds one classifier column per class name
data = make_synthetic(SyntheticSpec(k=5, seed=0))
print("class names:", data.class_names)
W = enc.build_zero_shot_classifier(data.class_names)
print("classifier", W.W.shape, "column norms", np.round(np.linalg.norm(W.W, axis=0), 4))

# %% image features and probabilities
images = data.splits["test"].images[:8]
with no_grad():
    z = enc.encode_image(images).data
probs = cosine_classify(z, W.W, enc.logit_scale).data
print("predicted", probs.argmax(1), "true", data.splits["test"].labels[:8])

# The backbone is random, so zero-shot accuracy is near chance.  Prompt tuning
# (next demo) adapts the frozen model to the task.
