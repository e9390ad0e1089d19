"""Synthetic paired image-text data and the MWADATA1 file format.

Every example belongs to a concept and also carries a few attribute choices
shared by both of its modalities. The concept gives a whole-grid visual
pattern and a set of concept words; each attribute slot paints a patch
region and contributes one word. Matching a specific caption to a specific
image therefore needs both concept and attribute agreement, and neither
modality is a copy of the other.

File layout (all integers little-endian)::

    b"MWADATA1"
    u32 manifest length, manifest bytes (UTF-8 "key=value" lines)
    per example, in split order train, eval, heldout:
        u64 id, u32 concept_id,
        u32 patches, u32 patch_dim, patches*patch_dim f32,
        u32 token count, token count u32 ids
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MWADATA1"
FORMAT_VERSION = 1

GRID = 4
PATCHES = GRID * GRID
PATCH_DIM = 48
CONCEPT_SLOTS = 3
SYNONYMS = 2
ATTR_SLOTS = 4
ATTR_VALUES = 3
FILLERS = 1
FILLER_POOL = 16
TEXT_LEN = CONCEPT_SLOTS + ATTR_SLOTS + FILLERS


class DatasetFormatError(ValueError):
    """Malformed dataset file."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DatasetVersionError(ValueError):
    """Dataset file written by an unsupported format version."""


@dataclass
class PairedExample:
    id: int
    concept_id: int
    image: np.ndarray
    text: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, PairedExample)
            and self.id == other.id
            and self.concept_id == other.concept_id
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.text, other.text)
        )


@dataclass
class DatasetSplit:
    train: list
    eval: list
    heldout: list
    manifest: dict = field(default_factory=dict)

    def parts(self):
        return {"train": self.train, "eval": self.eval, "heldout": self.heldout}

    def __eq__(self, other):
        return (
            isinstance(other, DatasetSplit)
            and self.manifest == other.manifest
            and self.train == other.train
            and self.eval == other.eval
            and self.heldout == other.heldout
        )


@dataclass
class RetrievalBatch:
    ids: np.ndarray
    images: np.ndarray
    texts: np.ndarray

    def __len__(self):
        return len(self.ids)


def stack(examples):
    """Batch a list of examples (item ``i`` image matches item ``i`` text)."""
    return RetrievalBatch(
        ids=np.array([e.id for e in examples], dtype=np.int64),
        images=np.stack([e.image for e in examples]),
        texts=np.stack([e.text for e in examples]),
    )


# ---------------------------------------------------------------- vocabulary


def _vocab_layout(seed, n_concepts, vocab_size):
    """Seeded assignment of token ids to concept words, attribute words and fillers."""
    need = n_concepts * CONCEPT_SLOTS * SYNONYMS + ATTR_SLOTS * ATTR_VALUES + FILLER_POOL
    if need > vocab_size:
        raise ValueError(f"vocab_size={vocab_size} too small for {n_concepts} concepts (need {need})")
    perm = np.random.default_rng([seed, 0x70C]).permutation(vocab_size)
    k = n_concepts * CONCEPT_SLOTS * SYNONYMS
    concept_ids = perm[:k].reshape(n_concepts, CONCEPT_SLOTS, SYNONYMS)
    attr_ids = perm[k:k + ATTR_SLOTS * ATTR_VALUES].reshape(ATTR_SLOTS, ATTR_VALUES)
    fillers = perm[k + ATTR_SLOTS * ATTR_VALUES:need]
    return concept_ids, attr_ids, fillers


def concept_signature(seed, concept_id):
    """Visual signature of a concept: a fixed ``[patches, patch_dim]`` pattern."""
    return np.random.default_rng([seed, 1, concept_id]).standard_normal((PATCHES, PATCH_DIM))


def attribute_patterns(seed):
    """``[slots, values, patches, patch_dim]`` patterns, each confined to its slot's region."""
    rng = np.random.default_rng([seed, 3])
    pats = np.zeros((ATTR_SLOTS, ATTR_VALUES, PATCHES, PATCH_DIM))
    per = PATCHES // ATTR_SLOTS
    for s in range(ATTR_SLOTS):
        region = slice(s * per, (s + 1) * per)
        pats[s, :, region, :] = rng.standard_normal((ATTR_VALUES, per, PATCH_DIM))
    return pats


def _make_example(seed, idx, concept, noise, sig, attr_pats, vocab):
    concept_ids, attr_ids, fillers = vocab
    rng = np.random.default_rng([seed, 2, idx])
    attrs = rng.integers(0, ATTR_VALUES, size=ATTR_SLOTS)
    image = sig.copy()
    for s, v in enumerate(attrs):
        image += attr_pats[s, v]
    image += noise * rng.standard_normal(image.shape)
    words = [concept_ids[concept, s, rng.integers(SYNONYMS)] for s in range(CONCEPT_SLOTS)]
    words += [attr_ids[s, v] for s, v in enumerate(attrs)]
    words += list(rng.choice(fillers, size=TEXT_LEN - len(words)))
    text = np.array(words, dtype=np.int64)[rng.permutation(TEXT_LEN)]
    return PairedExample(idx, concept, image.astype(np.float32), text)


def generate(seed, n_examples=256, n_concepts=8, noise=0.1, vocab_size=512):
    """Balanced synthetic dataset split into train / eval / held-out concepts.

    The held-out split (``n_examples // 10`` items) only uses the reserved
    concepts (the last two ids, or the last one when ``n_concepts < 4``), which
    never appear in train or eval. Eval is ``n_examples // 10`` items of the
    remaining concepts; the rest is train.
    """
    if n_concepts < 2:
        raise ValueError(f"n_concepts must be >= 2, got {n_concepts}")
    if n_examples <= 0 or n_examples % n_concepts:
        raise ValueError(f"n_examples={n_examples} must be a positive multiple of n_concepts={n_concepts}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    vocab = _vocab_layout(seed, n_concepts, vocab_size)
    attr_pats = attribute_patterns(seed)
    sigs = [concept_signature(seed, c) for c in range(n_concepts)]
    examples = [
        _make_example(seed, i, i % n_concepts, noise, sigs[i % n_concepts], attr_pats, vocab)
        for i in range(n_examples)
    ]
    n_reserved = 2 if n_concepts >= 4 else 1
    reserved = set(range(n_concepts - n_reserved, n_concepts))
    n_eval = n_held = n_examples // 10
    kept = [e for e in examples if e.concept_id not in reserved]
    held_pool = [e for e in examples if e.concept_id in reserved]
    order = np.random.default_rng([seed, 4]).permutation(len(kept))
    eval_ids = set(order[:n_eval].tolist())
    train = [e for i, e in enumerate(kept) if i not in eval_ids]
    evals = [e for i, e in enumerate(kept) if i in eval_ids]
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "n_examples": n_examples,
        "n_concepts": n_concepts,
        "noise": float(noise),
        "vocab_size": vocab_size,
        "patches": PATCHES,
        "patch_dim": PATCH_DIM,
        "text_len": TEXT_LEN,
        "heldout_concepts": ",".join(str(c) for c in sorted(reserved)),
        "n_train": len(train),
        "n_eval": len(evals),
        "n_heldout": min(n_held, len(held_pool)),
    }
    return DatasetSplit(train, evals, held_pool[:n_held], manifest)


def batches(examples, batch_size, epoch_seed):
    """Seeded shuffle into full batches; the last short batch is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for a contrastive loss, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(len(examples))
    out = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        out.append(stack([examples[i] for i in order[start:start + batch_size]]))
    return out


# --------------------------------------------------------------- persistence


def _format_manifest(manifest):
    return "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")


_MANIFEST_TYPES = {
    "format_version": int, "seed": int, "n_examples": int, "n_concepts": int, "noise": float,
    "vocab_size": int, "patches": int, "patch_dim": int, "text_len": int,
    "heldout_concepts": str, "n_train": int, "n_eval": int, "n_heldout": int,
}


def _parse_manifest(raw, offset):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetFormatError(f"manifest is not UTF-8: {e.reason}", offset + e.start) from None
    manifest = {}
    pos = offset
    for line in text.splitlines(keepends=True):
        key, sep, value = line.rstrip("\n").partition("=")
        if not sep:
            raise DatasetFormatError(f"manifest line without '=': {line!r}", pos)
        conv = _MANIFEST_TYPES.get(key, str)
        try:
            manifest[key] = conv(value)
        except ValueError:
            raise DatasetFormatError(f"bad manifest value for {key}: {value!r}", pos) from None
        pos += len(line.encode("utf-8"))
    return manifest


def dumps(split):
    buf = io.BytesIO()
    buf.write(MAGIC)
    manifest = _format_manifest(split.manifest)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    for part in (split.train, split.eval, split.heldout):
        for e in part:
            img = np.ascontiguousarray(e.image, dtype="<f4")
            buf.write(struct.pack("<QI", e.id, e.concept_id))
            buf.write(struct.pack("<II", *img.shape))
            buf.write(img.tobytes())
            buf.write(struct.pack("<I", len(e.text)))
            buf.write(np.asarray(e.text, dtype="<u4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data):
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic[:7] == MAGIC[:7] and magic != MAGIC:
        raise DatasetVersionError(
            f"dataset magic {magic!r} is version {magic[7:].decode(errors='replace')}, "
            f"this reader supports version {FORMAT_VERSION}"
        )
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    (mlen,) = r.unpack("<I", "manifest length")
    moff = r.pos
    manifest = _parse_manifest(r.take(mlen, "manifest"), moff)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"dataset format_version {version} is not supported (reader version {FORMAT_VERSION})"
        )
    parts = []
    for key in ("n_train", "n_eval", "n_heldout"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing {key}", moff)
        part = []
        for _ in range(manifest[key]):
            idx, concept = r.unpack("<QI", "example header")
            rows, cols = r.unpack("<II", "image shape")
            img = np.frombuffer(r.take(4 * rows * cols, "image data"), dtype="<f4")
            image = img.reshape(rows, cols).astype(np.float32)
            (ntok,) = r.unpack("<I", "token count")
            text = np.frombuffer(r.take(4 * ntok, "token ids"), dtype="<u4").astype(np.int64)
            part.append(PairedExample(int(idx), int(concept), image, text))
        parts.append(part)
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after last example", r.pos)
    return DatasetSplit(parts[0], parts[1], parts[2], manifest)


def save(split, path):
    with open(path, "wb") as f:
        f.write(dumps(split))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
