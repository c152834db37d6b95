"""Bit-exact checkpoint files.

Layout (little-endian)::

    "GCPC" | u32 version | u32 meta_len | meta JSON
    | u32 n_tensors | per tensor:
        u16 name_len | name utf-8 | u8 trainable | u8 ndim | u32 dims[ndim] | f64 data
"""
from __future__ import annotations

import io
import json
import struct
import warnings

import numpy as np

from .numcore import ParameterStore
from .synthdata import FormatError, _Reader

MAGIC = b"GCPC"
VERSION = 1


class ConfigHashWarning(UserWarning):
    pass


def save_checkpoint(path, store: ParameterStore, meta: dict) -> None:
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(store)))
    for name, t in store.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", int(store.is_trainable(name)), t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected_config_hash: str | None = None) -> tuple[ParameterStore, dict]:
    """Read a checkpoint; warns (does not fail) when the stored config hash differs."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a GCPC checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (mlen,) = r.unpack("<I", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode())
    except ValueError as exc:
        raise FormatError(f"corrupt metadata: {exc}", at) from exc
    (n,) = r.unpack("<I", "tensor count")
    store = ParameterStore()
    for _ in range(n):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode()
        trainable, ndim = r.unpack("<BB", "tensor header")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        count = int(np.prod(shape)) if ndim else 1
        data = r.array("<f8", count, f"tensor block {name!r}").astype(np.float64).reshape(shape)
        try:
            store.add(name, data, trainable=bool(trainable))
        except (KeyError, ValueError, ArithmeticError) as exc:
            raise FormatError(f"bad tensor {name!r}: {exc}", at) from exc
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    stored = meta.get("config_hash")
    if expected_config_hash is not None and stored is not None and stored != expected_config_hash:
        warnings.warn(f"checkpoint {path} was written under config {stored[:12]}, "
                      f"current config is {expected_config_hash[:12]}", ConfigHashWarning, stacklevel=2)
    return store, meta
