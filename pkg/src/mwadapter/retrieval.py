"""Contrastive retrieval objective, Recall@K, drift, and the training loop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .data import batches, stack
from .multiway import Modality, encode
from .optim import OptimizerHyper, OptimizerState, cosine_lr, optimizer_step
from .tensor import GradTape, NonFiniteError, backward

RECALL_KS = (1, 5, 10)
EVAL_CHUNK = 64


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient stopped training."""


def info_nce_loss(img_emb, txt_emb, temperature=0.07):
    """Symmetric InfoNCE over the in-batch similarity matrix; row ``i`` pairs with row ``i``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if img_emb.shape != txt_emb.shape:
        raise T.ShapeError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    for t in (img_emb, txt_emb):
        if not np.isfinite(t.data).all():
            raise NonFiniteError("info_nce_loss: non-finite embeddings")
    logits = T.mul(T.matmul(img_emb, T.transpose(txt_emb)), 1.0 / temperature)
    targets = np.arange(img_emb.shape[0])
    i2t = T.cross_entropy(logits, targets)
    t2i = T.cross_entropy(T.transpose(logits), targets)
    return T.mul(T.add(i2t, t2i), 0.5)


def recall_at_k(sim, k):
    """Image-to-text (``tr``) and text-to-image (``ir``) Recall@k of a square matrix.

    ``sim[i, j]`` scores image ``i`` against text ``j``; the diagonal holds the
    true pairs. Ties rank the lower index first.
    """
    sim = np.ascontiguousarray(sim)
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    tr_ranks = kernels.diagonal_ranks(sim)
    ir_ranks = kernels.diagonal_ranks(np.ascontiguousarray(sim.T))
    return {"ir": float(np.mean(ir_ranks < k)), "tr": float(np.mean(tr_ranks < k))}


@dataclass
class RetrievalMetrics:
    ir: dict
    tr: dict
    loss: float
    n: int

    def row(self):
        return [self.ir[1], self.ir[5], self.ir[10], self.tr[1], self.tr[5], self.tr[10], self.loss]


def embed_split(model, examples, chunk=EVAL_CHUNK):
    """Image and text embeddings (numpy) for a list of examples, no tape."""
    imgs, txts = [], []
    for start in range(0, len(examples), chunk):
        b = stack(examples[start:start + chunk])
        imgs.append(encode(b.images, Modality.VISION, model).data)
        txts.append(encode(b.texts, Modality.LANGUAGE, model).data)
    return np.concatenate(imgs), np.concatenate(txts)


def evaluate(model, examples, temperature=0.07):
    img, txt = embed_split(model, examples)
    sim = img @ txt.T
    n = len(examples)
    ir, tr = {}, {}
    for k in RECALL_KS:
        r = recall_at_k(sim, min(k, n))
        ir[k], tr[k] = r["ir"], r["tr"]
    loss = float(info_nce_loss(T.Tensor(img), T.Tensor(txt), temperature).data)
    return RetrievalMetrics(ir, tr, loss, n)


def embedding_drift(model_a, model_b, examples):
    """Mean L2 distance between the two models' embeddings, over both modalities."""
    if model_a.cfg != model_b.cfg:
        raise ValueError("embedding_drift: models have different backbone configurations")
    ia, ta = embed_split(model_a, examples)
    ib, tb = embed_split(model_b, examples)
    dists = np.concatenate([np.linalg.norm(ia - ib, axis=1), np.linalg.norm(ta - tb, axis=1)])
    return float(dists.astype(np.float64).mean())


@dataclass
class TrainHyper:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    temperature: float = 0.07
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    schedule: str = "cosine"
    sgd: bool = False
    max_steps: int | None = None
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    metrics: dict


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    update_set: list = field(default_factory=list)
    steps: int = 0

    def final(self, split="eval"):
        return self.history[-1].metrics[split]


def train(model, split, hyper, eval_parts=("train", "eval", "heldout"), on_epoch=None):
    """Minimize InfoNCE over the model's trainable parameters.

    Records epoch 0 (before any update) and every completed epoch. Stops
    early once ``hyper.max_steps`` updates have been made.
    """
    params = model.trainable()
    result = TrainResult(update_set=[p.name for p in params])
    opt = OptimizerHyper(hyper.lr, tuple(hyper.betas), 1e-8, hyper.weight_decay, hyper.sgd)
    state = OptimizerState()
    per_epoch = len(split.train) // hyper.batch_size
    total = hyper.epochs * per_epoch
    if hyper.max_steps is not None:
        total = min(total, hyper.max_steps)

    def record(epoch, train_loss):
        metrics = {p: evaluate(model, split.parts()[p], hyper.temperature)
                   for p in eval_parts if split.parts()[p]}
        rec = EpochRecord(epoch, train_loss, metrics)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    record(0, None)
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        if step >= total:
            break
        losses = []
        for bi, batch in enumerate(batches(split.train, hyper.batch_size, [hyper.seed, epoch])):
            if step >= total:
                break
            lr = cosine_lr(hyper.lr, step, total) if hyper.schedule == "cosine" else hyper.lr
            try:
                with GradTape() as tape:
                    img = encode(batch.images, Modality.VISION, model)
                    txt = encode(batch.texts, Modality.LANGUAGE, model)
                    loss = info_nce_loss(img, txt, hyper.temperature)
                grads = backward(loss, tape) if params else {}
            except NonFiniteError as e:
                raise TrainingDiverged(f"training diverged at step {step} (epoch {epoch}, batch {bi}): {e}") from e
            if params:
                optimizer_step(params, grads, state, opt, lr=lr)
            losses.append(float(loss.data))
            step += 1
        record(epoch, float(np.mean(losses)) if losses else None)
    result.steps = step
    return result
