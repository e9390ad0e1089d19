"""Experiment drivers behind the CLI: train, sweep, ablate, drift, gradcheck, count.

Each driver is a pure function of the :class:`ExperimentConfig` (wall-clock
aside) and returns plain data; writing files is the CLI's job.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .adapters import (
    AdapterConfig,
    adapter_param_formula,
    attach_adapters,
    component_counts,
    count_params,
    freeze_backbone,
)
from .gradcheck import finite_diff_check
from .multiway import BackboneConfig, Modality, MultiWayModel, encode
from .retrieval import embedding_drift, evaluate, info_nce_loss, train

DEFAULT_MIDS = (0, 1, 2, 4, 8, 16)
GRADCHECK_TOL = 1e-5


class ConsistencyError(RuntimeError):
    """An internal cross-check failed (maps to exit status 2)."""


@dataclass
class RunOutcome:
    mode: str
    model: MultiWayModel
    result: object
    count: object
    components: dict
    seconds: float
    update_set: list = field(default_factory=list)


def dataset(cfg):
    d = cfg.data
    return D.generate(d.seed, d.n_examples, d.n_concepts, d.noise, cfg.backbone.vocab_size)


def backbone(cfg):
    """The untouched backbone for ``cfg`` (same seed as every training run)."""
    return MultiWayModel(cfg.backbone, seed=cfg.seed)


def build_model(cfg, mode, adapter=None):
    """Fresh backbone; for ``mwa`` mode attach adapters and freeze the rest."""
    if mode not in ("full", "mwa"):
        raise ValueError(f"mode must be 'full' or 'mwa', got {mode!r}")
    model = backbone(cfg)
    if mode == "mwa":
        attach_adapters(model, adapter or cfg.adapter, seed=cfg.seed)
        names = freeze_backbone(model)
    else:
        names = [p.name for p in model.parameters()]
    return model, names


def run_training(cfg, mode, split=None, adapter=None, on_epoch=None):
    split = split if split is not None else dataset(cfg)
    model, names = build_model(cfg, mode, adapter)
    t0 = time.perf_counter()
    result = train(model, split, cfg.train_hyper(), on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    if result.update_set != names:
        raise ConsistencyError("optimizer update set differs from the trainable parameter list")
    return RunOutcome(mode, model, result, count_params(model), component_counts(model), seconds, names)


def check_count(cfg, adapter=None):
    """Enumerated vs closed-form adapter count for ``cfg``; raises on mismatch."""
    adapter = adapter or cfg.adapter
    model, names = build_model(cfg, "mwa", adapter)
    pc = count_params(model)
    comps = component_counts(model)
    b = cfg.backbone
    expected = adapter_param_formula(
        b.d, b.layers, adapter.ke_mid if adapter.ke_on else 0, adapter.ae_mid if adapter.ae_on else 0
    )
    if pc.trainable != expected or comps["ke"] + comps["ae"] != expected:
        raise ConsistencyError(f"adapter count {pc.trainable} does not match closed form {expected}")
    if pc.total != comps["backbone"] + expected:
        raise ConsistencyError("total parameter count does not add up")
    return pc, comps


def sweep_adapter(cfg, mid):
    """Sweep point: the KE width is ``mid`` and the AE keeps its default ratio to the KE."""
    base = cfg.adapter
    ratio = base.ae_mid / base.ke_mid if base.ke_mid else 2
    return dataclasses.replace(base, ke_mid=mid, ae_mid=int(round(mid * ratio)))


def run_sweep(cfg, mids=DEFAULT_MIDS, split=None, on_point=None):
    if not mids:
        raise ValueError("mids must be non-empty")
    split = split if split is not None else dataset(cfg)
    points = []
    for mid in mids:
        adapter = sweep_adapter(cfg, mid)
        point = {"mid": mid, "ir1": None, "tr1": None, "trainable_params": None, "status": "ok"}
        try:
            out = run_training(cfg, "mwa", split, adapter)
            final = out.result.final("eval")
            point.update(ir1=final.ir[1], tr1=final.tr[1], trainable_params=out.count.trainable)
        except Exception as e:  # a failed point is recorded and the sweep goes on
            point["status"] = f"failed: {type(e).__name__}: {e}".replace(",", ";")
            point["trainable_params"] = _safe_formula(cfg, adapter)
        points.append(point)
        if on_point is not None:
            on_point(point)
    return points


def _safe_formula(cfg, adapter):
    try:
        return adapter_param_formula(cfg.backbone.d, cfg.backbone.layers, adapter.ke_mid, adapter.ae_mid)
    except Exception:
        return -1


ABLATION_ROWS = ("full fine-tune", "KE only", "AE only", "KE + AE")


def ablation_adapters(cfg):
    base = cfg.adapter
    return {
        "KE only": dataclasses.replace(base, enable_ke=True, enable_ae=False),
        "AE only": dataclasses.replace(base, enable_ke=False, enable_ae=True),
        "KE + AE": dataclasses.replace(base, enable_ke=True, enable_ae=True),
    }


def run_ablation(cfg, split=None, full=None):
    """Rows keyed by :data:`ABLATION_ROWS`; ``full`` reuses an existing full-FT outcome."""
    split = split if split is not None else dataset(cfg)
    rows = {"full fine-tune": full or run_training(cfg, "full", split)}
    for label, adapter in ablation_adapters(cfg).items():
        rows[label] = run_training(cfg, "mwa", split, adapter)
    return rows


@dataclass
class DriftResult:
    drift: dict
    heldout: dict
    zero_shot: object


def run_drift(cfg, split=None, full=None, mwa=None):
    """Drift of full-FT and MWA embeddings from the untouched backbone on held-out concepts."""
    split = split if split is not None else dataset(cfg)
    if not split.heldout:
        raise ValueError("dataset has no held-out split")
    full = full or run_training(cfg, "full", split)
    mwa = mwa or run_training(cfg, "mwa", split)
    base = backbone(cfg)
    temp = cfg.train.temperature
    return DriftResult(
        drift={m: embedding_drift(o.model, base, split.heldout) for m, o in (("full", full), ("mwa", mwa))},
        heldout={m: evaluate(o.model, split.heldout, temp) for m, o in (("full", full), ("mwa", mwa))},
        zero_shot=evaluate(base, split.heldout, temp),
    )


# ---------------------------------------------------------------- gradcheck

MICRO_BACKBONE = BackboneConfig(
    d=8, layers=2, heads=2, ffn_hidden=16, vocab_size=32, patch_input_dim=6, max_tokens=8, embed_dim_out=6,
)
MICRO_ADAPTER = AdapterConfig(ke_mid=2, ae_mid=3, alpha=0.7)


@dataclass
class GradcheckOutcome:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int
    checked_names: list
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= GRADCHECK_TOL


def micro_model(seed=0):
    """2-block d=8 adapted model in float64 with all adapter weights randomized.

    Randomizing the up-projections keeps every adapter gradient non-trivial
    (with zero-init up-projections the down-projection gradients vanish).
    """
    model = MultiWayModel(MICRO_BACKBONE, seed=seed, dtype=np.float64)
    attach_adapters(model, MICRO_ADAPTER, seed=seed)
    names = freeze_backbone(model)
    rng = np.random.default_rng([seed, 0x6C])
    for n in names:
        p = model.params[n]
        p.tensor.data[...] = rng.normal(0.0, 0.5, size=p.shape) + (1.0 if n.endswith("ln_gamma") else 0.0)
    return model, names


def run_gradcheck(seed=0, eps=1e-5, corrupt=None):
    """Check every trainable coordinate of the micro model through the InfoNCE loss.

    ``corrupt`` (test hook) maps a parameter name to an array added to its
    autodiff gradient before the comparison.
    """
    model, names = micro_model(seed)
    rng = np.random.default_rng([seed, 0x6D])
    c = MICRO_BACKBONE
    images = rng.normal(size=(3, 4, c.patch_input_dim))
    texts = rng.integers(0, c.vocab_size, size=(3, 5))

    def loss():
        return info_nce_loss(encode(images, Modality.VISION, model), encode(texts, Modality.LANGUAGE, model), 0.5)

    grads = None
    if corrupt:
        from .tensor import GradTape, backward

        with GradTape() as tape:
            value = loss()
        grads = backward(value, tape)
        for n, delta in corrupt.items():
            grads[n] = grads[n] + delta
    t0 = time.perf_counter()
    res = finite_diff_check(loss, model.parameters(), eps=eps, grads=grads)
    return GradcheckOutcome(res.max_rel_error, res.worst_param, res.worst_index, res.checked,
                            names, time.perf_counter() - t0)
