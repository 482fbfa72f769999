"""Versioned binary checkpoints.

Layout (little endian)::

    b"AADM" | u32 version | u32 len | config JSON | u32 n_tensors
    n_tensors x ( u16 len | name | u8 ndim | u32 dims... | f32 data )
    u32 CRC-32 of everything before it

Tensor names are the model's parameter/buffer names, plus ``adam.m/<name>``
and ``adam.v/<name>`` for optimiser moments.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint
from .model import Model, ModelConfig

MAGIC = b"AADM"
VERSION = 1


def _tensors(model: Model):
    out = dict(model.state())
    for prefix, store in (("adam.m/", model.adam_m), ("adam.v/", model.adam_v)):
        for k in sorted(store):
            out[prefix + k] = store[k]
    return out


def save_checkpoint(model: Model, path) -> None:
    blob = json.dumps(model.config_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    tensors = _tensors(model)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptCheckpoint("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12 or zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    r = _Reader(raw[:-4])
    r.take(4)
    version, blen = r.unpack("<II")
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    try:
        meta = json.loads(r.take(blen))
        model = Model(ModelConfig(**meta["model"]), meta["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: bad config block ({exc})") from exc
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    try:
        model.load_state({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    except KeyError as exc:
        raise CorruptCheckpoint(f"{path}: missing or misshapen tensor {exc}") from exc
    model.adam_m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    model.adam_v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    model.adam_step = meta.get("adam_step", 0)
    return model
