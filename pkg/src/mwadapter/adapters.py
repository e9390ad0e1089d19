"""Bottleneck adapters for MultiWay blocks: knowledge extractor and alignment enhancer.

Knowledge extractor (KE): one per modality expert, in parallel with that
expert's FFN and reading the expert's (frozen) pre-FFN LayerNorm output::

    out = h + FFN(LN(h)) + alpha * (ReLU(LN(h) @ W_down + b_down) @ W_up + b_up)

Alignment enhancer (AE): one per block, shared by every token of both
modalities, applied on top of the expert pool with its own LayerNorm::

    out = y + alpha * (ReLU(LN_ae(y) @ W_down + b_down) @ W_up + b_up)

Up-projections start at zero, so attaching adapters leaves the network's
function unchanged until training moves them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, add, layer_norm, matmul, mul, relu

MODALITY_NAMES = ("vision", "language")


class AdapterError(RuntimeError):
    """Adapter attachment contract violated."""


@dataclass
class AdapterConfig:
    ke_mid: int = 8
    ae_mid: int = 16
    alpha: float = 10.0
    enable_ke: bool = True
    enable_ae: bool = True
    ke_alpha: float | None = None
    ae_alpha: float | None = None

    @property
    def ke_on(self):
        return self.enable_ke and self.ke_mid > 0

    @property
    def ae_on(self):
        return self.enable_ae and self.ae_mid > 0

    @property
    def ke_scale(self):
        return self.alpha if self.ke_alpha is None else self.ke_alpha

    @property
    def ae_scale(self):
        return self.alpha if self.ae_alpha is None else self.ae_alpha

    def validate(self, d):
        for label, mid in (("ke_mid", self.ke_mid), ("ae_mid", self.ae_mid)):
            if mid < 0:
                raise ValueError(f"{label} must be >= 0, got {mid}")
            if mid >= d:
                raise ValueError(f"{label}={mid} must be smaller than the model width d={d}")


@dataclass
class BottleneckParams:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    ln_gamma: Tensor | None = None
    ln_beta: Tensor | None = None

    @property
    def owns_ln(self):
        return self.ln_gamma is not None


@dataclass
class ParamCount:
    total: int
    trainable: int

    @property
    def fraction(self):
        return self.trainable / self.total if self.total else 0.0


def bottleneck_forward(x_norm, p, ln_eps=1e-5):
    """Adapted features from an input.

    ``x_norm`` is already LayerNorm-ed for a KE (the shared pre-FFN LN); when
    ``p`` owns its LN (AE case) the raw input is passed and normalized here.
    """
    d = x_norm.shape[-1]
    if p.w_down.shape[0] != d or p.w_up.shape[1] != d:
        raise ShapeError(
            f"bottleneck: input width {d} does not match w_down {p.w_down.shape} / w_up {p.w_up.shape}"
        )
    if p.owns_ln:
        x_norm = layer_norm(x_norm, p.ln_gamma, p.ln_beta, ln_eps)
    hidden = relu(add(matmul(x_norm, p.w_down), p.b_down))
    return add(matmul(hidden, p.w_up), p.b_up)


def ke_sublayer(h, ffn, ke, alpha, ln_gamma, ln_beta, ln_eps=1e-5):
    """FFN sublayer with a knowledge extractor in parallel.

    ``ffn`` maps the normalized input to the FFN output. ``ke=None`` gives the
    plain pre-LN sublayer ``h + FFN(LN(h))``.
    """
    x_norm = layer_norm(h, ln_gamma, ln_beta, ln_eps)
    out = add(h, ffn(x_norm))
    if ke is not None:
        out = add(out, mul(bottleneck_forward(x_norm, ke), alpha))
    return out


def ae_apply(y, ae, alpha, ln_eps=1e-5):
    if ae is None:
        return y
    if not ae.owns_ln:
        raise AdapterError("alignment enhancer must own its LayerNorm")
    return add(y, mul(bottleneck_forward(y, ae, ln_eps), alpha))


# ----------------------------------------------------------- model surgery


def _ke_prefix(block, modality):
    return f"block.{block}.ke.{modality}"


def _ae_prefix(block):
    return f"block.{block}.ae"


def is_adapter_param(name):
    return ".ke." in name or ".ae." in name


def component_of(name):
    if ".ke." in name:
        return "ke"
    if ".ae." in name:
        return "ae"
    return "backbone"


def _bottleneck_params(prefix, d, mid, rng, dtype, with_ln):
    bound = 1.0 / math.sqrt(d)
    tensors = {
        "w_down": rng.uniform(-bound, bound, size=(d, mid)),
        "b_down": np.zeros(mid),
        "w_up": np.zeros((mid, d)),
        "b_up": np.zeros(d),
    }
    if with_ln:
        tensors["ln_gamma"] = np.ones(d)
        tensors["ln_beta"] = np.zeros(d)
    return [Parameter(f"{prefix}.{k}", Tensor(v.astype(dtype))) for k, v in tensors.items()]


def attach_adapters(model, cfg, seed=0):
    """Insert KE (per expert) and AE (per block) parameters into ``model``.

    Backbone parameters are left untouched. Freezing is a separate step
    (:func:`freeze_backbone`).
    """
    if model.adapter_cfg is not None:
        raise AdapterError("adapters are already attached to this model")
    d = model.cfg.d
    cfg.validate(d)
    rng = np.random.default_rng([seed, 0xADA])
    added = []
    for b in range(model.cfg.layers):
        if cfg.ke_on:
            for modality in MODALITY_NAMES:
                added += _bottleneck_params(_ke_prefix(b, modality), d, cfg.ke_mid, rng, model.dtype, False)
        if cfg.ae_on:
            added += _bottleneck_params(_ae_prefix(b), d, cfg.ae_mid, rng, model.dtype, True)
    for p in added:
        model.add_parameter(p)
    model.adapter_cfg = cfg
    return model


def _bottleneck_from(model, prefix):
    t = model.tensor_or_none
    if t(f"{prefix}.w_down") is None:
        return None
    return BottleneckParams(
        t(f"{prefix}.w_down"), t(f"{prefix}.b_down"), t(f"{prefix}.w_up"), t(f"{prefix}.b_up"),
        t(f"{prefix}.ln_gamma"), t(f"{prefix}.ln_beta"),
    )


def ke_for(model, block, modality):
    return _bottleneck_from(model, _ke_prefix(block, modality))


def ae_for(model, block):
    return _bottleneck_from(model, _ae_prefix(block))


def freeze_backbone(model):
    """Freeze every non-adapter parameter; return the trainable (adapter) names."""
    trainable = []
    for p in model.parameters():
        if is_adapter_param(p.name):
            p.unfreeze()
            trainable.append(p.name)
        else:
            p.freeze()
    return trainable


def count_params(model):
    total = trainable = 0
    for p in model.parameters():
        total += p.size
        if not p.frozen:
            trainable += p.size
    return ParamCount(total, trainable)


def component_counts(model):
    counts = {"backbone": 0, "ke": 0, "ae": 0}
    for p in model.parameters():
        counts[component_of(p.name)] += p.size
    return counts


def ke_params_per_block(d, mid, n_experts=2):
    return n_experts * (2 * d * mid + mid + d) if mid > 0 else 0


def ae_params_per_block(d, mid):
    return 2 * d * mid + mid + d + 2 * d if mid > 0 else 0


def adapter_param_formula(d, layers, ke_mid, ae_mid, n_experts=2):
    """Closed-form adapter parameter count for ``layers`` blocks."""
    return layers * (ke_params_per_block(d, ke_mid, n_experts) + ae_params_per_block(d, ae_mid))
