"""Reader/writer for the "TSA1" tensor-archive interchange format.

Implemented directly against the published layout so the bridge stays
decoupled from the compressor package:

    magic "TSA1" | header length (u64 LE) | JSON header | data section

The header maps tensor name to {dtype: f32|f16, shape, offset, nbytes};
offsets are relative to the data section, 64-byte aligned, and entries
are lexicographic by name in both header and data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSA1"
ALIGNMENT = 64
DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float16): "f16"}


class TsaError(ValueError):
    pass


def write_tsa(tensors: dict[str, np.ndarray], path: str | Path) -> int:
    """Write a name -> float32/float16 array mapping; returns bytes written."""
    header: dict[str, dict] = {}
    placed = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in DTYPE_NAMES:
            raise TsaError(f"tensor {name!r}: dtype {arr.dtype} not storable (f32/f16 only)")
        offset = -(-offset // ALIGNMENT) * ALIGNMENT
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {"dtype": DTYPE_NAMES[arr.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": nbytes}
        placed.append((offset, arr))
        offset += nbytes
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        pos = 0
        for off, arr in placed:
            fh.write(b"\x00" * (off - pos))
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            fh.write(data)
            pos = off + len(data)
        return fh.tell()


def read_tsa(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TsaError(f"bad magic {raw[:4]!r}")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    data = raw[12 + header_len:]
    out = {}
    for name, spec in header.items():
        dtype = DTYPES[spec["dtype"]]
        start, nbytes = spec["offset"], spec["nbytes"]
        if start + nbytes > len(data):
            raise TsaError(f"tensor {name!r} extends past end of file")
        out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=start).reshape(spec["shape"])
    return out
