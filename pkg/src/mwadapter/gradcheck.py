"""Central finite-difference verification of autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GradTape, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    checked: int


def relative_error(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def finite_diff_check(f, params, eps=1e-4, max_coords=None, rng=None, grads=None):
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads the current parameter values. Frozen
    parameters are skipped. ``max_coords`` caps the coordinates checked per
    parameter (sampled with ``rng``); ``None`` checks all of them. ``grads``
    substitutes precomputed autodiff gradients (used to test the checker).
    """
    params = [p for p in params if not p.frozen]
    for p in params:
        if p.tensor.dtype != np.float64:
            raise TypeError(f"finite_diff_check needs float64 parameters; {p.name} is {p.tensor.dtype}")
    if grads is None:
        with GradTape() as tape:
            loss = f()
        grads = backward(loss, tape)
    worst = GradCheckResult(0.0, None, None, 0)
    for p in params:
        w = p.tensor.data
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(w)
        coords = list(np.ndindex(w.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            orig = w[idx]
            w[idx] = orig + eps
            f_plus = float(f().data)
            w[idx] = orig - eps
            f_minus = float(f().data)
            w[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            err = relative_error(float(g[idx]), numeric)
            worst.checked += 1
            if err > worst.max_rel_error or worst.worst_param is None:
                worst.max_rel_error = err
                worst.worst_param = p.name
                worst.worst_index = tuple(int(i) for i in idx)
    return worst
