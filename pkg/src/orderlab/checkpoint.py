"""Tensor container format.

Layout::

    bytes 0..7   little-endian uint64: length H of the JSON header
    bytes 8..8+H UTF-8 JSON: {"tensors": {name: {"dtype": "<f8", "shape": [...],
                                                "offset": o, "nbytes": n}},
                              "metadata": {...}}
    rest         concatenated little-endian float64 buffers; offsets are
                 relative to the first byte after the header

Tensor names are written in sorted order and the JSON is dumped with sorted
keys, so identical contents give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


def save(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries, buffers, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries[name] = {"dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    base = 8 + hlen
    tensors = {}
    for name, e in header["tensors"].items():
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=e["dtype"])
        tensors[name] = arr.reshape(tuple(e["shape"])).astype(np.float64)
    return tensors, header.get("metadata", {})


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
