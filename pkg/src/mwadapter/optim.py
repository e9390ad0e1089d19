"""AdamW (decoupled weight decay) with a plain-SGD mode, and a cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import FrozenParameterError


@dataclass
class OptimizerHyper:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    sgd: bool = False


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name, shape):
    """Weight decay applies to matrices only (not biases, LayerNorm, CLS/pos vectors)."""
    return len(shape) == 2 and not name.endswith(("pos_embed",))


def optimizer_step(params, grads, state, hyper, lr=None):
    """Update ``params`` (a list of Parameters) in place from ``grads``.

    ``lr`` overrides ``hyper.lr`` (used by the schedule). Parameters with no
    entry in ``grads`` are treated as having a zero gradient.
    """
    lr = hyper.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = hyper.betas
    for p in params:
        if p.frozen:
            raise FrozenParameterError(f"optimizer asked to update frozen parameter {p.name!r}")
        w = p.tensor.data
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(w)
        if hyper.sgd:
            w -= lr * g
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(w)
            state.v[p.name] = np.zeros_like(w)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if hyper.weight_decay and decays(p.name, w.shape):
            w *= 1 - lr * hyper.weight_decay
        w -= (lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(w.dtype)
    return params, state


def cosine_lr(base_lr, step, total_steps):
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
