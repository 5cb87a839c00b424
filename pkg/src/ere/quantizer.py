"""Round-to-nearest factor quantization and Stiefel re-projection.

Factor matrices are quantized column-by-column on a symmetric b-bit grid
(b in {2, 4, 8}) with one binary16 scale per column; singular values are
stored in binary16. Dequantized factors can be projected back onto the
nearest matrix with orthonormal columns via the polar factor of an SVD.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 4, 8)
FLOAT16_MAX = 65504.0


class RankDeficiencyWarning(UserWarning):
    """Projection input did not have full column rank."""


@dataclass(frozen=True)
class QuantizedFactor:
    """Bit-packed codes plus per-column scales for one factor matrix.

    Codes are unsigned, one per element, packed little-endian within each
    byte (low bits first) in column-major element order. The zero point
    is 2**(bits-1) - 1, so the representable grid is symmetric.
    """

    bits: int
    rows: int
    cols: int
    codes: np.ndarray   # packed uint8
    scales: np.ndarray  # float16, one per column

    @property
    def zero_point(self) -> int:
        return (1 << (self.bits - 1)) - 1


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack unsigned codes (< 2**bits) into bytes, low bits first."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if np.any(codes >= (1 << bits)):
        raise ValueError(f"codes must be < 2**{bits}")
    if bits == 8:
        return codes.copy()
    per_byte = 8 // bits
    padded = np.zeros(-(-codes.size // per_byte) * per_byte, dtype=np.uint8)
    padded[: codes.size] = codes
    groups = padded.reshape(-1, per_byte)
    out = np.zeros(len(groups), dtype=np.uint8)
    for j in range(per_byte):
        out |= groups[:, j] << (bits * j)
    return out


def unpack_codes(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; validates length and padding bits."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    packed = np.asarray(packed, dtype=np.uint8).reshape(-1)
    per_byte = 8 // bits
    expected = -(-count // per_byte)
    if packed.size != expected:
        raise ValueError(f"packed stream has {packed.size} bytes, expected {expected}")
    if bits == 8:
        return packed.copy()
    mask = (1 << bits) - 1
    out = np.empty((packed.size, per_byte), dtype=np.uint8)
    for j in range(per_byte):
        out[:, j] = (packed >> (bits * j)) & mask
    flat = out.reshape(-1)
    if np.any(flat[count:]):
        raise ValueError("corrupted packing: non-zero padding bits past the last code")
    return flat[:count]


def quantize(x: np.ndarray, bits: int) -> QuantizedFactor:
    """Symmetric per-column round-to-nearest quantization.

    scale_c = maxabs(column c) / (2**(bits-1) - 1), stored as binary16;
    codes are computed against the stored scale so the round-trip error is
    at most scale/2 + one binary16 ulp of the scale, elementwise. Columns
    whose scale underflows binary16 quantize to zero.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D factor, got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    qmax = (1 << (bits - 1)) - 1
    scales = (np.max(np.abs(x), axis=0) / qmax).astype(np.float16)
    s = scales.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0, np.round(x / np.where(s > 0, s, 1.0)), 0.0)
    codes = (q + qmax).astype(np.uint8)
    packed = pack_codes(codes.reshape(-1, order="F"), bits)
    return QuantizedFactor(bits=bits, rows=x.shape[0], cols=x.shape[1],
                           codes=packed, scales=scales)


def dequantize(q: QuantizedFactor) -> np.ndarray:
    """Reconstruct the float32 matrix (code - zero_point) * scale."""
    count = q.rows * q.cols
    codes = unpack_codes(q.codes, q.bits, count).reshape((q.rows, q.cols), order="F")
    scales = q.scales.astype(np.float32)
    return ((codes.astype(np.float32) - np.float32(q.zero_point)) * scales[None, :])


def stiefel_project(x: np.ndarray, warn: bool = True) -> np.ndarray:
    """Nearest matrix with orthonormal columns, in Frobenius norm.

    Returns the polar factor a @ b.T of the SVD x = a @ diag(s) @ b.T,
    which is defined for any input; rank-deficient inputs get a
    deterministic completion and raise :class:`RankDeficiencyWarning`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < x.shape[1]:
        raise ValueError(f"expected an n x k matrix with n >= k, got {x.shape}")
    a, s, bt = np.linalg.svd(x, full_matrices=False)
    if warn and (len(s) == 0 or s[-1] <= max(x.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)):
        warnings.warn("projection input is rank deficient; completion is the SVD polar factor",
                      RankDeficiencyWarning, stacklevel=2)
    return a @ bt


def encode_half(values: np.ndarray) -> np.ndarray:
    """Round to IEEE 754 binary16 (nearest-even), saturating with a warning."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    if np.any(np.abs(arr) > FLOAT16_MAX):
        warnings.warn(f"values beyond binary16 range saturate to +/-{FLOAT16_MAX}",
                      stacklevel=2)
        arr = np.clip(arr, -FLOAT16_MAX, FLOAT16_MAX)
    return arr.astype(np.float16)


def decode_half(values: np.ndarray) -> np.ndarray:
    """Widen binary16 back to float32; exact for every representable value."""
    return np.asarray(values, dtype=np.float16).astype(np.float32)
