"""Model checkpoint format.

Layout, all little-endian::

    b"GASPCKPT"  u32 version  u32 header_len
    header: UTF-8 JSON {"config": {...}, "meta": {...},
                        "tensors": [{"name", "dtype": "f64", "shape", "offset"}]}
    tensor data: f64, concatenated in table order (offsets relative to data start)
    SHA-256 of everything above (32 bytes)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, CorruptCheckpoint
from .model import ModelConfig, ToyModel

MAGIC = b"GASPCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


def encode_checkpoint(model: ToyModel, meta: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, t in model.params.items():
        data = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
        table.append({"name": name, "dtype": "f64", "shape": list(t.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.config.to_dict(), "meta": meta or {}, "tensors": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: ToyModel, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, meta))
    return path


def decode_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> tuple[ToyModel, dict]:
    if len(buf) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpoint("file too short")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch")
    try:
        header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen])
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from None
    data = body[_PREFIX.size + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        start = entry["offset"]
        if entry["dtype"] != "f64" or start + n > len(data):
            raise CorruptCheckpoint(f"bad tensor entry {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[start : start + n], dtype="<f8").reshape(shape).copy()
    if expected is not None:
        _check_config(config, expected)
    want = ToyModel.parameter_shapes(config)
    if set(want) != set(arrays):
        raise CorruptCheckpoint("tensor table does not match the embedded config")
    return ToyModel.from_arrays(config, arrays), header.get("meta", {})


def _check_config(found: ModelConfig, expected: ModelConfig) -> None:
    a, b = ToyModel.parameter_shapes(found), ToyModel.parameter_shapes(expected)
    diffs = [f"{k}: checkpoint {a.get(k)} vs config {b.get(k)}" for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
    if diffs or found != expected:
        detail = "; ".join(diffs[:5]) or "non-shape fields differ"
        raise ConfigMismatch(f"checkpoint config does not match: {detail}")


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ToyModel, dict]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpoint(f"no checkpoint at {path}") from None
    return decode_checkpoint(buf, expected)
