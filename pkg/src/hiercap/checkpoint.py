"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HCK1"              magic
    u32                  format version (1)
    u64                  manifest length M in bytes
    M bytes              UTF-8 JSON manifest:
                         {"config": {...},
                          "tensors": [{"name", "shape", "offset", "length"}, ...]}
    payload              concatenated float32 little-endian arrays, row-major;
                         offset/length are byte positions within the payload
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"HCK1"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version or unreadable manifest."""


class CheckpointCorruptError(ValueError):
    """Manifest and payload disagree."""


def encode(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _HEADER.size:
        raise CheckpointFormatError("file shorter than the checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if start + mlen > len(blob):
        raise CheckpointCorruptError("manifest extends past end of file")
    try:
        manifest = json.loads(blob[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    payload = memoryview(blob)[start + mlen:]
    tensors: dict[str, np.ndarray] = {}
    spans = []
    for ent in manifest["tensors"]:
        name, off, length = ent["name"], ent["offset"], ent["length"]
        shape = tuple(ent["shape"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointCorruptError(f"tensor {name!r}: length {length} does not match shape {shape}")
        if off < 0 or off + length > len(payload):
            raise CheckpointCorruptError(f"tensor {name!r}: bytes {off}..{off + length} exceed payload of {len(payload)}")
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(payload[off:off + length], dtype="<f4").reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointCorruptError(f"tensors {an!r} and {bn!r} overlap in the payload")
    return tensors, manifest["config"]


def save(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write atomically: a failed save never leaves a partial file behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors, config)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".hck")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
