"""``.mwck`` checkpoints: named tensors with their frozen flags.

Layout (little-endian)::

    b"MWCK", u32 version, u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 frozen, u8 dtype code (0=f32, 1=f64),
                u8 ndim, ndim x u32 dims, row-major payload
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MWCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def dumps(params):
    """Serialize an iterable of Parameters."""
    params = list(params)
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = p.tensor.data
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{p.name}: unsupported dtype {arr.dtype}")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<BBB", int(p.frozen), code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def loads(data):
    """Parse checkpoint bytes into ``[(name, frozen, array)]`` in file order."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not an MWCK checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (reader version {VERSION})")
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        frozen, code, ndim = struct.unpack("<BBB", take(3, "tensor header"))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize, "payload"), dtype=dt).reshape(dims)
        entries.append((name, bool(frozen), arr.astype(dt.newbyteorder("="))))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint")
    return entries


def save(model, path):
    with open(path, "wb") as f:
        f.write(dumps(model.parameters()))


def load_into(model, path):
    """Restore values and frozen flags into a model with the same parameter names."""
    with open(path, "rb") as f:
        entries = loads(f.read())
    names = {n for n, _, _ in entries}
    missing = set(model.params) - names
    extra = names - set(model.params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, frozen, arr in entries:
        p = model.params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match model {p.shape}")
        p.tensor.data = arr.astype(p.tensor.dtype)
        if frozen:
            p.freeze()
        else:
            p.unfreeze()
    return model
