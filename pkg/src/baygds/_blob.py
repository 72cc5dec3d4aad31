"""Versioned binary container: magic, version, JSON header, raw little-endian arrays."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_PREFIX = struct.Struct("<4sHI")


class BlobFormatError(ValueError):
    pass


def write_blob(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    specs, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        dt = arr.dtype.newbyteorder("<")
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        chunks.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_blob(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise BlobFormatError(f"{path}: too short")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise BlobFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise BlobFormatError(f"{path}: unsupported version {got_version}")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise BlobFormatError(f"{path}: corrupt header") from exc
    offset = _PREFIX.size + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise BlobFormatError(f"{path}: truncated payload for {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data, dt, count, offset).reshape(spec["shape"]).astype(dt.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise BlobFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], arrays
