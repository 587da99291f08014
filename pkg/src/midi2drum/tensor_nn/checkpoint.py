"""Checkpoint files: a JSON header followed by raw little-endian arrays.

Byte layout::

    offset      size   field
    0           8      magic b"M2DCKPT\\x00"
    8           4      header length H (uint32, little endian)
    12          H      header, UTF-8 JSON:
                         {"format_version": 1,
                          "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
                          "meta": {...}}
    12 + H      ...    data section; each tensor is C-ordered, little endian
                       ("<f8", "<f4" or "<i8") at data_start + offset

Tensors appear in the data section in header order with no padding.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"M2DCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPES.get(arr.dtype.name)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        blob = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 12 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
