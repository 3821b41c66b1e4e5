"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

import dataclasses

import numpy as np

from uniprompt.autodiff.tensor import backward, no_grad

FD_STEP = 1e-5


@dataclasses.dataclass
class GradCheckResult:
    name: str
    coordinate_error: float
    directional_error: float
    checked: int

    @property
    def max_error(self):
        return max(self.coordinate_error, self.directional_error)


def relative_error(analytic, numeric, floor=1e-5):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(loss_fn, array, step=FD_STEP, indices=None):
    """Central differences of ``loss_fn()`` w.r.t. entries of ``array`` (mutated in place, then restored)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    with no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            plus = float(loss_fn().data)
            flat[i] = original - step
            minus = float(loss_fn().data)
            flat[i] = original
            out.append((plus - minus) / (2.0 * step))
    return np.array(out)


def directional_derivative(loss_fn, array, direction, step=FD_STEP):
    original = array.copy()
    with no_grad():
        array[...] = original + step * direction
        plus = float(loss_fn().data)
        array[...] = original - step * direction
        minus = float(loss_fn().data)
    array[...] = original
    return (plus - minus) / (2.0 * step)


def check_parameters(loss_fn, params, step=FD_STEP, coords_per_param=6, rng=None):
    """Compare analytic and numeric gradients for each tensor in ``params``.

    For every parameter a random subset of coordinates is perturbed
    individually, and the whole tensor is perturbed along one random unit
    direction.  ``params`` holds 64-bit tensors whose ``.data`` arrays are
    perturbed in place.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None if not hasattr(p, "zero_grad") else np.zeros_like(p.data)
    backward(loss_fn())
    results = []
    for p in params:
        analytic = np.array(p.grad, dtype=np.float64, copy=True)
        size = p.data.size
        chosen = rng.choice(size, size=min(size, coords_per_param), replace=False)
        numeric = numerical_gradient(loss_fn, p.data, step, chosen)
        coord_err = float(relative_error(analytic.reshape(-1)[chosen], numeric).max())
        direction = rng.standard_normal(p.data.shape)
        direction /= np.linalg.norm(direction)
        num_dir = directional_derivative(loss_fn, p.data, direction, step)
        dir_err = float(relative_error(np.sum(analytic * direction), num_dir))
        results.append(GradCheckResult(p.name or "param", coord_err, dir_err, len(chosen)))
    return results
