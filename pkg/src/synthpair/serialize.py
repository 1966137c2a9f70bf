"""Binary checkpoint blobs: 8-byte little-endian header length, JSON header, raw arrays.

The header lists every array (name, dtype, shape, byte offset) plus free-form
metadata. Arrays are stored little-endian, back to back, in header order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SYP1"


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = _le(np.asarray(arrays[name]))
        h.update(name.encode())
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_blob(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write arrays + metadata; returns the content hash of the arrays."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    digest = content_hash(arrays)
    header = json.dumps({"meta": meta or {}, "tensors": entries, "sha256": digest},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)
    return digest


def load_blob(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint blob")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        body = f.read()
    arrays = {}
    for e in header["tensors"]:
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    if content_hash(arrays) != header.get("sha256"):
        raise ValueError(f"{path}: content hash mismatch")
    return arrays, header["meta"]


def write_token_shard(path: str | Path, grids: np.ndarray, k: int) -> None:
    """Packed uint16 token ids behind a JSON header ``{N, K, count}``."""
    grids = np.asarray(grids)
    if grids.ndim != 2:
        raise ValueError("token shard expects a (count, N) array")
    if k + 1 > 65535:
        raise ValueError("uint16 packing needs K + 1 <= 65535")
    if grids.size and (grids.min() < 0 or grids.max() > k):
        raise ValueError("token ids out of range")
    header = json.dumps({"N": int(grids.shape[1]), "K": int(k), "count": int(grids.shape[0])}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(grids.astype("<u2").tobytes())


def read_token_shard(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        data = np.frombuffer(f.read(), dtype="<u2")
    expected = header["count"] * header["N"]
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} ids, found {data.size}")
    return data.reshape(header["count"], header["N"]).astype(np.int64), header
