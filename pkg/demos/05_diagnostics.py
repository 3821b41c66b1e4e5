# Diagnostics: feature variances, sphere projection, attention maps
#
# Var_v is the mean over classes of each class's per-dimension population
# variance (averaged over dimensions); Var_t is the same statistic over the
# classifier columns.  The synthetic generator has one knob for each.

# %%
import numpy as np

from uniprompt.data import SyntheticSpec, make_synthetic
from uniprompt.diagnostics import attention_response_map, image_features, project_to_sphere, variance_report
from uniprompt.encoder import TextConfig, VisionConfig, init_backbone
from uniprompt.prompts import make_strategy

enc = init_backbone(VisionConfig(), TextConfig(), seed=0)

for sigma in (0.1, 0.5, 1.0):
    rep = variance_report(enc, make_synthetic(SyntheticSpec(sigma_v=sigma, seed=1)))
    print(f"sigma_v {sigma}: Var_v {rep.var_v:.5f}")
for rho in (0.0, 0.8):
    data = make_synthetic(SyntheticSpec(rho=rho, seed=1))
    print(f"rho {rho}: Var_t {variance_report(enc, data).var_t:.5f}  names {data.class_names[:2]}")

# %% joint-space features and classifier columns on the unit sphere in R^3
data = make_synthetic(SyntheticSpec(seed=1))
feats = image_features(enc, data.splits["test"].images)
proj = project_to_sphere(feats, enc.build_zero_shot_classifier(data.class_names))
print("sphere points", proj.points.shape, "method", proj.method, "padded", proj.padded)
print("classifier directions\n", np.round(proj.classifier, 3))

# %% attention from visual prompts to image patches in the last block
s = make_strategy("vpt_deep", enc, seed=1)
amap = attention_response_map(enc, s, data.splits["test"].images[0], layer=-1, image_id="test/0")
mean_grid, _ = amap.grid_maps()
print("prompt 0 attention over the 4x4 patch grid\n", np.round(mean_grid[0], 4))
print("full softmax rows sum to", np.round(amap.rows.sum(-1).ravel()[:4], 6))
