# Reverse-mode autodiff on numpy arrays
#
# Every op records its inputs; backward() walks the graph once and fills
# .grad on leaves that require it.  Frozen parameters never join the graph.

# %%
import numpy as np

from uniprompt.autodiff import Parameter, Tensor, backward, cross_entropy, layer_norm, precision
from uniprompt.autodiff.gradcheck import check_parameters
from uniprompt.errors import GraphError

# %% a two-layer toy model
with precision(np.float64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(6, 4)))
    w = Parameter(rng.normal(size=(4, 3)), name="w")
    gamma = Parameter(np.ones(4), trainable=False, name="gamma")
    beta = Parameter(np.zeros(4), trainable=False, name="beta")
    labels = np.array([0, 1, 2, 0, 1, 2])

    def loss_fn():
        return cross_entropy(layer_norm(x, gamma, beta) @ w, labels)

    loss = loss_fn()
    backward(loss)
    print("loss", float(loss.data))
    print("dL/dw\n", w.grad)
    print("frozen gamma has grad?", np.any(gamma.grad))

# %% a graph is consumed by backward
try:
    backward(loss)
except GraphError as exc:
    print("second backward:", exc)

# %% central differences agree with the analytic gradient
with precision(np.float64):
    for r in check_parameters(loss_fn, [w]):
        print(f"{r.name}: coordinate err {r.coordinate_error:.1e}, directional err {r.directional_error:.1e}")
