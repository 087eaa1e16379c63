"""
Deterministic binary encoding of named numpy arrays.

Layout: u32 header length, a UTF-8 JSON header listing each array's name,
dtype, shape and byte length in order, then the raw little-endian C-order
bytes of every array back to back. Equal inputs give equal bytes.
"""

import json
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

from .errors import CheckpointError

_LENGTH = struct.Struct("<I")


def pack_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    header = []
    blobs = []
    for name, array in arrays.items():
        a = np.asarray(array)
        a = np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<")))
        blob = a.tobytes(order="C")
        header.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "nbytes": len(blob)})
        blobs.append(blob)
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return _LENGTH.pack(len(head)) + head + b"".join(blobs)


def unpack_arrays(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < _LENGTH.size:
        raise CheckpointError("array block shorter than its length prefix")
    (head_len,) = _LENGTH.unpack_from(data, 0)
    start = _LENGTH.size + head_len
    if start > len(data):
        raise CheckpointError("array block header runs past the end of the data")
    try:
        header = json.loads(data[_LENGTH.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable array block header: {e}") from e

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = start
    for entry in header:
        end = offset + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"array '{entry['name']}' is truncated")
        dtype = np.dtype(entry["dtype"])
        arrays[entry["name"]] = np.frombuffer(data[offset:end], dtype=dtype).reshape(entry["shape"]).copy()
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last array")
    return arrays
