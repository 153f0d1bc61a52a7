"""Versioned binary checkpoints with a SHA-256 content digest.

Layout (all integers little-endian)::

    b"NIVA" | u32 version | u32 config length | config JSON
    | 32-byte SHA-256 of everything after the digest
    | u32 tensor count | per tensor: u32 name length, name, u32 ndim,
      u32 extents..., float32 values in row-major order

The config is canonical JSON (sorted keys, no whitespace), so writing the
same model twice yields identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .config import ModelConfig
from .scenario import FormatError, atomic_write

MAGIC = b"NIVA"
CHECKPOINT_VERSION = 1


class DigestMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_tensors(state: dict) -> bytes:
    parts = [struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name], dtype="<f4"))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(payload: bytes) -> dict:
    state = {}
    try:
        (count,), pos = struct.unpack_from("<I", payload, 0), 4
        for _ in range(count):
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            state[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as err:
        raise FormatError(f"malformed tensor section: {err}") from err
    if pos != len(payload):
        raise FormatError("trailing bytes after tensor section")
    return state


def checkpoint_bytes(config: dict, state: dict) -> bytes:
    cfg = canonical_json(config)
    tensors = encode_tensors(state)
    digest = hashlib.sha256(cfg + tensors).digest()
    return MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(cfg)) + cfg + digest + tensors


def parse_checkpoint(data: bytes):
    """Return (config dict, state dict); nothing is returned on any error."""
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(data) < 12:
        raise FormatError("truncated header")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    cfg_raw = data[12:12 + cfg_len]
    digest = data[12 + cfg_len:44 + cfg_len]
    tensors = data[44 + cfg_len:]
    if len(cfg_raw) != cfg_len or len(digest) != 32:
        raise FormatError("truncated header")
    if hashlib.sha256(cfg_raw + tensors).digest() != digest:
        raise DigestMismatch("checkpoint digest mismatch")
    try:
        config = json.loads(cfg_raw)
    except json.JSONDecodeError as err:
        raise FormatError(f"bad config JSON: {err}") from err
    return config, decode_tensors(tensors)


def write_checkpoint(path, model, extra: dict | None = None):
    config = {"model": dataclasses.asdict(model.cfg)}
    if extra:
        config.update(extra)
    atomic_write(path, checkpoint_bytes(config, model.state_dict()))


def read_checkpoint(path):
    """Load a model. Values round-trip through float32."""
    from .model import Niva

    with open(path, "rb") as fh:
        config, state = parse_checkpoint(fh.read())
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(config.get("model", {})) - fields
    if unknown:
        raise FormatError(f"unknown model config keys {sorted(unknown)}")
    model = Niva(ModelConfig(**config["model"]))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise FormatError(f"checkpoint does not match its config: {err}") from err
    return model, config
