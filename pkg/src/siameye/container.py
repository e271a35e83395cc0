"""Weight container file format.

Layout: 6-byte magic ``SEYE\\x00\\x01``, a little-endian uint32 header
length, a UTF-8 JSON header, then the raw array blocks concatenated in
header order.  Arrays are stored little-endian; float32 round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SEYE\x00\x01"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "uint8": "|u1",
    "int64": "<i8",
}


def write_container(path, tensors, meta=None):
    """Write named arrays plus a JSON meta dict to `path`.

    `tensors` is an ordered sequence of (name, array) pairs; names must be
    unique and dtypes limited to float32/float64/uint8/int64.
    """
    entries = []
    blocks = []
    seen = set()
    for name, arr in tensors:
        arr = np.asarray(arr)
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)}
        )
        blocks.append(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for block in blocks:
            fh.write(block)


def read_container(path):
    """Read a container; returns (meta, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a weight container (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated block for {entry['name']!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(entry["dtype"], copy=True)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared blocks")
    return header["meta"], tensors
