"""Versioned binary model checkpoints. Layout is documented in docs/checkpoint_format.md."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .config import canonical_json, model_config_from_dict, model_config_to_dict
from .errors import CheckpointError, ConfigError
from .model import Model, build_model, unique_parameters

MAGIC = b"NLABCKPT"
FORMAT_VERSION = 1


def checkpoint_bytes(model: Model) -> bytes:
    header = canonical_json(model_config_to_dict(model.cfg)).encode()
    params = unique_parameters(model)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(p.data.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path) -> Path:
    return atomic_write(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a normlab checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    r.buf = body
    (hlen,) = r.unpack("<I")
    try:
        cfg = model_config_from_dict(json.loads(r.take(hlen).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint config header is invalid: {exc}") from exc

    model = build_model(cfg)
    params = unique_parameters(model)
    (count,) = r.unpack("<I")
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(params)}")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} with shape {shape}")
        n = int(np.prod(shape))
        params[name].data[...] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return model
