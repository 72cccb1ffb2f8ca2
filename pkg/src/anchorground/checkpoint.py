"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AIMA"                      magic
    u32 version                  FORMAT_VERSION
    u32 n, n bytes               model config as UTF-8 JSON
    u32 tensor count
    per tensor:
        u16 n, n bytes           parameter name (UTF-8)
        u8 ndim, ndim x u32      shape
        prod(shape) x f32        values, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError
from .model import GroundingTransformer, ModelConfig

MAGIC = b"AIMA"
FORMAT_VERSION = 1


def to_bytes(model: GroundingTransformer) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    out += struct.pack("<I", len(cfg)) + cfg
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name, t in state.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape)
        out += t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> GroundingTransformer:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (n,) = rd.unpack("<I")
    try:
        cfg = ModelConfig(**json.loads(rd.take(n)))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    model = GroundingTransformer(cfg)
    expected = model.state_dict()
    (count,) = rd.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} tensors, model expects {len(expected)}")
    state = {}
    for _ in range(count):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} with shape {shape}")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} trailing bytes after tensor table")
    model.load_state_dict(state)
    return model


def save_checkpoint(model: GroundingTransformer, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model))
    return path


def load_checkpoint(path) -> GroundingTransformer:
    return from_bytes(Path(path).read_bytes())
