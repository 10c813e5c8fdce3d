"""Binary checkpoint container.

Layout: ``b"PTPP"``, u16 format version, u32 metadata length, UTF-8 JSON
metadata, then the raw little-endian float32 payloads.  The metadata holds
a tensor directory (name, shape, byte offset into the payload section).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PTPP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors, metadata=None):
    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    meta = dict(metadata or {})
    meta["tensors"] = directory
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<HI", VERSION, len(blob))
    return header + blob + b"".join(chunks)


def loads(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 10
    meta = json.loads(buf[start : start + meta_len].decode("utf-8"))
    payload = memoryview(buf)[start + meta_len :]
    tensors = {}
    for entry in meta.pop("tensors"):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        off = entry["offset"]
        arr = np.frombuffer(payload[off : off + 4 * n], dtype="<f4")
        if arr.size != n:
            raise CheckpointError(f"truncated payload for {entry['name']!r}")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, meta


def save(path, tensors, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
