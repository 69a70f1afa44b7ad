"""Versioned single-file checkpoints.

Layout (little-endian)::

    4s   magic b"FRCK"
    u16  format version (currently 1)
    u32  metadata length, then that many bytes of UTF-8 JSON (sorted keys)
    u32  tensor count
    per tensor, in name order:
        u16  name length, UTF-8 name
        u8   dtype code (0 = float32, 1 = float64)
        u8   rank, then rank x u32 dimensions
        raw little-endian values, C order
    u32  CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import FlowModel, ModelConfig
from .tensor import Tensor

MAGIC = b"FRCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(params: dict, metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"cannot store {name!r} with dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes):
    """Return ``(params: dict[str, ndarray], metadata: dict)``."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(blob) < 14:
        raise CheckpointFormatError("checkpoint is truncated")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError("checkpoint fails its CRC check (corrupt or truncated)")
    r = _Reader(blob[:-4])
    r.take(4)
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint metadata is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.blob):
        raise CheckpointFormatError("checkpoint has trailing bytes")
    return params, metadata


def save_checkpoint(path, model: FlowModel, extra: dict | None = None) -> Path:
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    path = Path(path)
    path.write_bytes(encode_checkpoint(model.params, meta))
    return path


def load_checkpoint(path, dtype=None):
    """Rebuild ``(FlowModel, metadata)``; ``dtype`` casts the stored weights."""
    p = Path(path)
    if p.is_dir():
        raise CheckpointFormatError(f"{p} is a directory")
    params, meta = decode_checkpoint(p.read_bytes())
    if "model" not in meta:
        raise CheckpointFormatError("checkpoint metadata lacks a model config")
    try:
        config = ModelConfig(**meta["model"])
    except TypeError as exc:
        raise CheckpointFormatError(f"checkpoint model config is incompatible: {exc}") from None
    tensors = {k: Tensor(v, requires_grad=True, dtype=dtype or v.dtype) for k, v in params.items()}
    try:
        model = FlowModel(config, tensors)
    except ValueError as exc:
        raise CheckpointFormatError(f"checkpoint weights do not match its config: {exc}") from None
    return model, meta
