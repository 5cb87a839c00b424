"""Checkpoint container I/O.

Two containers are supported: the safetensors flat-tensor format
(read and write, parsed directly from its documented byte layout) and
the pickle-based torch checkpoint (read only, loaded with
``weights_only=True`` so no untrusted code runs).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SAFETENSORS_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
}
_WRITE_DTYPES = {np.dtype(np.float32): "F32", np.dtype(np.float16): "F16"}


class ContainerError(ValueError):
    pass


def sniff_format(path: str | Path) -> str:
    """Best-effort container detection: 'safetensors' or 'torch'."""
    path = Path(path)
    if path.suffix == ".safetensors":
        return "safetensors"
    with open(path, "rb") as fh:
        head = fh.read(10)
    if head[:2] == b"PK" or head[:2] == b"\x80\x02" or head[0:1] == b"\x80":
        return "torch"
    try:
        (header_len,) = struct.unpack("<Q", head[:8])
        if 0 < header_len < path.stat().st_size and head[8:9] in (b"{", b" "):
            return "safetensors"
    except struct.error:
        pass
    return "torch"


def _bf16_to_f32(buf: bytes) -> np.ndarray:
    # bfloat16 is the top half of float32; widening is exact
    as_u16 = np.frombuffer(buf, dtype="<u2").astype(np.uint32)
    return (as_u16 << 16).view(np.float32)


def read_safetensors(path: str | Path) -> dict[str, tuple[str, np.ndarray]]:
    """Returns name -> (source dtype tag, array). bf16 widens to f32."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerError("file too short for a safetensors header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise ContainerError("safetensors header extends past end of file")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"invalid safetensors header: {exc}") from exc
    data = raw[8 + header_len:]
    out = {}
    for name, spec in header.items():
        if name == "__metadata__":
            continue
        dtype_tag = spec["dtype"]
        start, end = spec["data_offsets"]
        if end > len(data) or start > end:
            raise ContainerError(f"tensor {name!r} has out-of-bounds offsets")
        buf = data[start:end]
        if dtype_tag == "BF16":
            arr = _bf16_to_f32(buf).reshape(spec["shape"])
            out[name] = ("bf16", arr)
        elif dtype_tag in SAFETENSORS_DTYPES:
            arr = np.frombuffer(buf, dtype=SAFETENSORS_DTYPES[dtype_tag]).reshape(spec["shape"])
            out[name] = (dtype_tag.lower(), arr)
        else:
            raise ContainerError(f"tensor {name!r}: unsupported safetensors dtype {dtype_tag}")
    return out


def write_safetensors(tensors: dict[str, np.ndarray], path: str | Path) -> int:
    """Write f32/f16 arrays as a safetensors file; returns bytes written."""
    header: dict[str, dict] = {}
    offset = 0
    ordered = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _WRITE_DTYPES:
            raise ContainerError(f"tensor {name!r}: dtype {arr.dtype} not writable")
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {"dtype": _WRITE_DTYPES[arr.dtype], "shape": list(arr.shape),
                        "data_offsets": [offset, offset + nbytes]}
        ordered.append(arr)
        offset += nbytes
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in ordered:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return fh.tell()


def read_torch_checkpoint(path: str | Path) -> dict[str, tuple[str, np.ndarray]]:
    """Load a pickle-based checkpoint without executing arbitrary code.

    Nested dicts are flattened with dotted names; non-tensor leaves are
    dropped. Returns name -> (source dtype tag, array); bf16 widens to
    f32 exactly.
    """
    import torch

    state = torch.load(path, map_location="cpu", weights_only=True)
    tensors: dict[str, tuple[str, np.ndarray]] = {}

    def visit(prefix: str, obj) -> None:
        if isinstance(obj, torch.Tensor):
            if obj.dtype == torch.bfloat16:
                tensors[prefix] = ("bf16", obj.to(torch.float32).numpy())
            elif obj.dtype == torch.float64:
                tensors[prefix] = ("f64", obj.numpy())
            elif obj.dtype == torch.float32:
                tensors[prefix] = ("f32", obj.numpy())
            elif obj.dtype == torch.float16:
                tensors[prefix] = ("f16", obj.numpy())
            else:
                tensors[prefix] = (str(obj.dtype).removeprefix("torch."), None)
        elif isinstance(obj, dict):
            for key, value in obj.items():
                visit(f"{prefix}.{key}" if prefix else str(key), value)

    visit("", state)
    return tensors
