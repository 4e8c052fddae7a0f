"""Single-file checkpoints: versioned header, JSON metadata, named tensors, sha256 trailer.

Layout (little-endian)::

    b"SEUCKPT\\0"  u32 version  u32 meta_len  meta(JSON, utf-8)  u32 n_tensors
    per tensor: u16 name_len  name  u8 dtype_code  u8 ndim  u32*ndim shape  u64 nbytes  payload
    32-byte sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SEUCKPT\x00"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint."""


class ConfigMismatchError(CheckpointError):
    def __init__(self, differences: dict):
        self.differences = differences
        detail = "; ".join(f"{k}: checkpoint={v[0]!r} expected={v[1]!r}" for k, v in differences.items())
        super().__init__(f"model config mismatch: {detail}")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    body = bytearray(MAGIC)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    body += struct.pack("<II", VERSION, len(meta)) + meta
    body += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<BB", _CODES[dt], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        body += struct.pack("<Q", len(payload)) + payload
    body += hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path, expected_model: dict | None = None) -> Checkpoint:
    """Read and verify a checkpoint; optionally require a matching model config dict."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 44 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos += 8
    meta = json.loads(body[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        arr = np.frombuffer(body[pos : pos + nbytes], dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")

    if expected_model is not None:
        found = meta.get("model", {})
        keys = sorted(set(found) | set(expected_model))
        diff = {k: (found.get(k), expected_model.get(k)) for k in keys if found.get(k) != expected_model.get(k)}
        if diff:
            raise ConfigMismatchError(diff)
    return Checkpoint(meta, tensors)
