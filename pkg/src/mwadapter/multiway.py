"""MultiWay Transformer backbone.

Each block has one self-attention shared by all tokens and a pool of FFN
experts, one per modality; every token goes through the expert of its own
modality. Retrieval embeddings come from the CLS position of a
single-modality sequence.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import adapters as ad
from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


class Modality(enum.IntEnum):
    VISION = 0
    LANGUAGE = 1

    @property
    def key(self):
        return self.name.lower()


@dataclass
class BackboneConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    ffn_hidden: int = 512
    vocab_size: int = 512
    patch_input_dim: int = 48
    max_tokens: int = 32
    embed_dim_out: int = 64
    ln_eps: float = 1e-5

    def validate(self):
        for name in ("d", "layers", "heads", "ffn_hidden", "vocab_size", "patch_input_dim",
                     "max_tokens", "embed_dim_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")


@dataclass
class TokenSequence:
    """Token features ``[batch, tokens, d]`` with a modality tag per token."""

    features: Tensor
    tags: np.ndarray
    cls_index: int = 0

    def __post_init__(self):
        self.tags = np.asarray(self.tags, dtype=np.int64)
        if self.features.ndim != 3 or self.features.shape[1] < 1:
            raise ShapeError(f"token features must be [batch, tokens>=1, d], got {self.features.shape}")
        if self.tags.shape[-1] != self.features.shape[1]:
            raise ShapeError(f"{self.tags.shape[-1]} tags for {self.features.shape[1]} tokens")


class MultiWayModel:
    """Parameter container plus the backbone's wiring.

    Parameters live in an insertion-ordered name -> Parameter map; adapters
    attach by adding parameters under ``block.<i>.ke.*`` / ``block.<i>.ae.*``.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.adapter_cfg = None
        self._init_backbone(np.random.default_rng([seed, 0xBACB]))

    # ----------------------------------------------------------- params

    def add_parameter(self, p):
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p

    def _new(self, name, arr):
        self.add_parameter(Parameter(name, Tensor(np.asarray(arr, dtype=self.dtype))))

    def _linear(self, prefix, fan_in, fan_out, rng, bias=True):
        self._new(f"{prefix}.w", rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        if bias:
            self._new(f"{prefix}.b", np.zeros(fan_out))

    def _init_backbone(self, rng):
        c = self.cfg
        d = c.d
        self._linear("patch_embed", c.patch_input_dim, d, rng)
        self._new("token_embed", rng.normal(0.0, 1.0, size=(c.vocab_size, d)))
        self._new("cls_token", rng.normal(0.0, 1.0, size=(d,)))
        self._new("pos_embed", rng.normal(0.0, 0.1, size=(c.max_tokens, d)))
        for b in range(c.layers):
            self._new(f"block.{b}.ln_attn.gamma", np.ones(d))
            self._new(f"block.{b}.ln_attn.beta", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                self._linear(f"block.{b}.attn.{proj}", d, d, rng)
            for m in Modality:
                pre = f"block.{b}.ffn.{m.key}"
                self._new(f"{pre}.ln.gamma", np.ones(d))
                self._new(f"{pre}.ln.beta", np.zeros(d))
                self._linear(f"{pre}.fc1", d, c.ffn_hidden, rng)
                self._linear(f"{pre}.fc2", c.ffn_hidden, d, rng)
        self._linear("head", d, c.embed_dim_out, rng, bias=False)

    def parameters(self):
        return list(self.params.values())

    def trainable(self):
        return [p for p in self.params.values() if not p.frozen]

    def tensor(self, name):
        return self.params[name].tensor

    def tensor_or_none(self, name):
        p = self.params.get(name)
        return None if p is None else p.tensor

    def state(self):
        """Copy of all parameter values keyed by name."""
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def load_state(self, state):
        for n, arr in state.items():
            self.params[n].tensor.data[...] = arr


# ------------------------------------------------------------------ layers


def _affine(x, model, prefix):
    return T.add(T.matmul(x, model.tensor(f"{prefix}.w")), model.tensor(f"{prefix}.b"))


def multihead_attention(x, model, block):
    """Scaled dot-product self-attention with the block's shared projections.

    ``x`` is the already-normalized ``[batch, tokens, d]`` input.
    """
    bsz, n, d = x.shape
    h = model.cfg.heads
    dh = d // h
    pre = f"block.{block}.attn"

    def split(t):
        return T.transpose(T.reshape(t, (bsz, n, h, dh)), (0, 2, 1, 3))

    q = split(_affine(x, model, f"{pre}.q"))
    k = split(_affine(x, model, f"{pre}.k"))
    v = split(_affine(x, model, f"{pre}.v"))
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (bsz, n, d))
    return _affine(ctx, model, f"{pre}.o")


def expert_sublayer(h, model, block, modality):
    """Pre-LN FFN sublayer of one modality expert, with its KE when attached."""
    pre = f"block.{block}.ffn.{modality.key}"
    ke = ad.ke_for(model, block, modality.key)
    alpha = model.adapter_cfg.ke_scale if ke is not None else 0.0

    def ffn(x_norm):
        return _affine(T.gelu(_affine(x_norm, model, f"{pre}.fc1")), model, f"{pre}.fc2")

    return ad.ke_sublayer(
        h, ffn, ke, alpha, model.tensor(f"{pre}.ln.gamma"), model.tensor(f"{pre}.ln.beta"),
        model.cfg.ln_eps,
    )


def route_ffn(x, tags, experts):
    """Send every token through the expert of its modality tag.

    ``experts`` maps a :class:`Modality` to a callable on ``[..., d]`` tensors.
    """
    bsz, n, d = x.shape
    tags = np.broadcast_to(np.asarray(tags, dtype=np.int64), (bsz, n))
    present = sorted(set(np.unique(tags).tolist()))
    for tag in present:
        if Modality(tag) not in experts:
            raise KeyError(f"no expert for modality {Modality(tag).name}")
    if len(present) == 1:
        return experts[Modality(present[0])](x)
    flat = T.reshape(x, (bsz * n, d))
    flat_tags = tags.reshape(-1)
    pieces = []
    for tag in present:
        ids = np.flatnonzero(flat_tags == tag)
        pieces.append((ids, experts[Modality(tag)](T.getitem(flat, ids))))
    return T.reshape(T.merge_rows(pieces, bsz * n), (bsz, n, d))


def block_forward(seq, model, block):
    """One pre-LN MultiWay block: shared attention, routed experts, optional AE."""
    x = seq.features
    pre = f"block.{block}.ln_attn"
    x_norm = T.layer_norm(x, model.tensor(f"{pre}.gamma"), model.tensor(f"{pre}.beta"), model.cfg.ln_eps)
    h = T.add(x, multihead_attention(x_norm, model, block))
    experts = {m: (lambda t, m=m: expert_sublayer(t, model, block, m)) for m in Modality}
    y = route_ffn(h, seq.tags, experts)
    ae = ad.ae_for(model, block)
    if ae is not None:
        y = ad.ae_apply(y, ae, model.adapter_cfg.ae_scale, model.cfg.ln_eps)
    return TokenSequence(y, seq.tags, seq.cls_index)


def embed(inputs, modality, model):
    """Input embedding with a prepended CLS token and positions."""
    c = model.cfg
    if modality == Modality.VISION:
        patches = np.asarray(inputs, dtype=model.dtype)
        if patches.ndim != 3 or patches.shape[2] != c.patch_input_dim:
            raise ShapeError(f"vision input must be [batch, patches, {c.patch_input_dim}], got {patches.shape}")
        tok = _affine(Tensor(patches), model, "patch_embed")
    else:
        ids = np.asarray(inputs)
        if ids.ndim != 2:
            raise ShapeError(f"language input must be [batch, tokens], got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise IndexError(f"token id out of vocabulary range [0, {c.vocab_size})")
        tok = T.take_rows(model.tensor("token_embed"), ids)
    bsz, n, d = tok.shape
    if n + 1 > c.max_tokens:
        raise ShapeError(f"{n + 1} tokens exceed max_tokens={c.max_tokens}")
    cls = T.reshape(model.tensor("cls_token"), (1, 1, d))
    cls = T.add(cls, Tensor(np.zeros((bsz, 1, d), dtype=model.dtype)))
    x = T.concat([cls, tok], axis=1)
    x = T.add(x, T.getitem(model.tensor("pos_embed"), slice(0, n + 1)))
    return TokenSequence(x, np.full(n + 1, int(modality)))


def encode(inputs, modality, model):
    """Unit-norm retrieval embeddings ``[batch, embed_dim_out]``."""
    seq = embed(inputs, Modality(modality), model)
    for b in range(model.cfg.layers):
        seq = block_forward(seq, model, b)
    cls = T.getitem(seq.features, (slice(None), seq.cls_index))
    return T.l2_normalize(T.matmul(cls, model.tensor("head.w")))
