"""Versioned binary container for named arrays.

Layout::

    magic   8 bytes  b"FXSGCKPT"
    version uint32 little-endian
    hlen    uint32 little-endian
    header  hlen bytes of UTF-8 JSON: {"meta": {...}, "records": [...]}
    payload concatenated little-endian raw array bytes

Each record is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with offsets
relative to the payload start.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FXSGCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4"}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    records, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for record {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        records.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "records": records}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for rec in header["records"]:
        start = base + rec["offset"]
        raw = blob[start:start + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated record {rec['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[rec["dtype"]])).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(rec["dtype"], copy=True)
    return arrays, header["meta"]
