"""Byte-stable single-file container of named arrays plus a JSON metadata block.

Layout (little-endian): ``b"MSCK"``, u32 version, u64 header length, JSON
header (key-sorted), then the raw array bytes in header order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from msnerv.errors import BitstreamError

MAGIC = b"MSCK"
VERSION = 1


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BitstreamError(f"{path}: not a checkpoint file", 0)
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise BitstreamError(f"{path}: unsupported checkpoint version {version}", 4)
    pos = 16
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(data):
            raise BitstreamError(f"{path}: truncated array {e['name']}", pos)
        arrays[e["name"]] = np.frombuffer(data[pos:pos + n], dtype=dt).reshape(e["shape"]).copy()
        pos += n
    return arrays, header["meta"]
