"""Binary checkpoint format for named float64 tensors.

Layout (all integers little-endian)::

    magic     8 bytes   b"TAXMTCK\\x00"
    version   uint32    currently 1
    hlen      uint64    byte length of the JSON header
    header    hlen bytes UTF-8 JSON:
                {"metadata": {...},
                 "tensors": [{"name": str, "shape": [int, ...], "offset": int}, ...]}
    payload   concatenated tensor values as little-endian float64 ("<f8"),
              C order; ``offset`` counts bytes from the start of the payload

The header is serialized with sorted keys, so identical inputs produce
identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TAXMTCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": dict(metadata or {}), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode())
    payload = memoryview(raw)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, header["metadata"]
