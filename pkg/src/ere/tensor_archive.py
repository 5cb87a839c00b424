"""Bit-exact container for named dense tensors: the "TSA1" format.

File layout::

    magic "TSA1" (4 bytes)
    header length, unsigned 64-bit little-endian
    UTF-8 JSON header: {name: {"dtype": "f32"|"f16", "shape": [...],
                               "offset": int, "nbytes": int}}
    data section: raw little-endian tensor bytes, row-major

Offsets are relative to the start of the data section and 64-byte
aligned, with zero padding in between. Entries appear in lexicographic
name order in both the header and the data section, so writing is a
pure function of the map contents and identical maps produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"TSA1"
ALIGNMENT = 64

_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float16): "f16"}


class ArchiveError(ValueError):
    """Malformed, inconsistent, or unwritable archive contents."""


@dataclass(frozen=True)
class TensorSpec:
    """Placement record for one tensor inside an archive."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offset: int
    data_nbytes: int


class TensorMap:
    """Immutable, name-ordered collection of dense float tensors.

    Accepts float32/float16 numpy arrays. Iteration order is
    lexicographic by name. All data must be finite unless
    ``allow_nonfinite`` is set. Instances are safe to share across
    threads; the stored arrays are marked read-only.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 allow_nonfinite: bool = False):
        entries: dict[str, np.ndarray] = {}
        for name in sorted(tensors or {}):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_NAMES:
                raise ArchiveError(
                    f"tensor {name!r} has dtype {arr.dtype}; only float32/float16 supported")
            if not allow_nonfinite and not np.all(np.isfinite(arr)):
                raise ArchiveError(f"tensor {name!r} contains non-finite values")
            arr = arr.copy() if arr.flags.writeable else arr
            arr.flags.writeable = False
            entries[name] = arr
        self._entries = entries
        self.allow_nonfinite = allow_nonfinite

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.names() != other.names():
            return False
        for name, arr in self.items():
            b = other[name]
            if arr.dtype != b.dtype or arr.shape != b.shape:
                return False
            if not np.array_equal(arr, b, equal_nan=True):
                return False
        return True

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors)"


def _align_up(offset: int) -> int:
    return -(-offset // ALIGNMENT) * ALIGNMENT


def write_archive(tensor_map: TensorMap, path: str | Path) -> int:
    """Serialize ``tensor_map`` to ``path``; returns bytes written."""
    header: dict[str, dict] = {}
    placed: list[tuple[int, np.ndarray]] = []
    offset = 0
    for name, arr in tensor_map.items():
        offset = _align_up(offset)
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        }
        placed.append((offset, arr))
        offset += nbytes

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        pos = 0
        for off, arr in placed:
            if off > pos:
                fh.write(b"\x00" * (off - pos))
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            fh.write(data)
            pos = off + len(data)
        return fh.tell()


def _reject_duplicate_names(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ArchiveError(f"duplicate tensor name {key!r} in header")
        seen[key] = value
    return seen


def read_archive(path: str | Path) -> TensorMap:
    """Parse a TSA1 file; inverse of :func:`write_archive`, element-exact."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ArchiveError(f"bad magic {raw[:4]!r}; expected {MAGIC!r}")
    if len(raw) < 12:
        raise ArchiveError("truncated file: missing header length")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    if 12 + header_len > len(raw):
        raise ArchiveError("truncated file: header extends past end of file")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"),
                            object_pairs_hook=_reject_duplicate_names)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"invalid header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ArchiveError("header is not a JSON object")

    data = raw[12 + header_len:]
    entries: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    nonfinite = False
    for name, spec in header.items():
        if not isinstance(spec, dict) or not {"dtype", "shape", "offset", "nbytes"} <= spec.keys():
            raise ArchiveError(f"entry {name!r} is missing required header fields")
        dtype_name = spec["dtype"]
        if dtype_name not in _DTYPES:
            raise ArchiveError(f"entry {name!r} has unsupported dtype {dtype_name!r}")
        shape = spec["shape"]
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape):
            raise ArchiveError(f"entry {name!r} has invalid shape {shape!r}")
        offset, nbytes = spec["offset"], spec["nbytes"]
        dtype = _DTYPES[dtype_name]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise ArchiveError(
                f"entry {name!r}: nbytes {nbytes} inconsistent with shape (expected {expected})")
        if offset < 0 or offset + nbytes > len(data):
            raise ArchiveError(f"entry {name!r}: data [{offset}, {offset + nbytes}) "
                               "extends past end of file")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize,
                            offset=offset).reshape(shape)
        if not np.all(np.isfinite(arr)):
            nonfinite = True
        entries[name] = arr

    spans.sort()
    for (_, prev_end, prev_name), (start, _, name) in zip(spans, spans[1:]):
        if start < prev_end:
            raise ArchiveError(f"entries {prev_name!r} and {name!r} overlap in the data section")

    return TensorMap(entries, allow_nonfinite=nonfinite)
