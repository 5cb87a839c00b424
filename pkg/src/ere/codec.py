"""End-to-end residual encode/decode and the "ERE1" archive format.

Pipeline: residual = finetuned - base, per-layer spectra, budgeted rank
allocation, truncated SVD, factor quantization, serialization. Decoding
adds the reconstructed residual back onto the base weights, projecting
dequantized factors onto the nearest orthonormal-column matrices.

File layout::

    magic "ERE1" (4 bytes)
    header length, unsigned 64-bit little-endian
    UTF-8 JSON header (sorted keys): version, config, budget, lambda,
        crc32 of the data section, and per-layer entries
        {kind: lowrank|raw|zero, shape, dtype, rank, sections}
    data section: per-layer payloads, packed back to back in
        lexicographic layer order

A lowrank layer's sections are u_codes, u_scales, d, v_codes, v_scales
(or u, d, v as raw float32 when quantization is disabled); a raw layer
has a single data section holding the fine-tuned tensor itself. Section
offsets are relative to the start of the data section. All integers are
little-endian; identical inputs and config produce byte-identical files.
"""

from __future__ import annotations

import fnmatch
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .allocator import AllocationConfig, allocate
from .quantizer import (QuantizedFactor, decode_half, dequantize, encode_half,
                        quantize, stiefel_project)
from .spectral import profile_from_singular_values, svd_full, truncate
from .tensor_archive import ArchiveError, TensorMap

ERE_MAGIC = b"ERE1"
FORMAT_VERSION = 1

_SECTION_ORDER = ("u_codes", "u_scales", "d", "v_codes", "v_scales", "u", "v", "data")
_RAW_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}


@dataclass(frozen=True)
class EreConfig:
    """Encoder settings.

    ``prior_rank`` fixes the parameter budget (uniform-rank equivalent);
    ``alpha`` mixes the solved ranks back toward that uniform prior.
    ``quantize=False`` is the lossless debug path: factors and singular
    values are stored as raw float32.
    """

    prior_rank: int
    bits: int = 4
    alpha: float = 0.5
    min_dim_eligible: int = 8
    raw_dtype: str = "f32"
    quantize: bool = True
    exclude: tuple[str, ...] = ()
    lambda_tolerance: float = 1e-9

    def __post_init__(self):
        if self.bits not in (2, 4, 8):
            raise ValueError(f"bits must be 2, 4, or 8, got {self.bits}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.prior_rank < 1:
            raise ValueError(f"prior_rank must be >= 1, got {self.prior_rank}")
        if self.raw_dtype not in _RAW_DTYPES:
            raise ValueError(f"raw_dtype must be f32 or f16, got {self.raw_dtype!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["exclude"] = list(self.exclude)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EreConfig":
        d = dict(d)
        d["exclude"] = tuple(d.get("exclude", ()))
        return cls(**d)


@dataclass(frozen=True)
class LayerEntry:
    """One archived layer: placement and reconstruction metadata."""

    name: str
    kind: str                 # lowrank | raw | zero
    shape: tuple[int, ...]
    dtype: str                # dtype of the decoded tensor
    rank: int = 0
    sections: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass
class EreArchive:
    """Parsed archive: config, solver metadata, layer entries, payload."""

    config: EreConfig
    budget: int | None
    lambda_star: float | None
    layers: dict[str, LayerEntry]
    data: bytes
    crc32: int

    def section_bytes(self, entry: LayerEntry, section: str) -> bytes:
        offset, nbytes = entry.sections[section]
        return self.data[offset:offset + nbytes]

    def header_bytes(self) -> bytes:
        layers = {}
        for name, e in self.layers.items():
            rec = {"kind": e.kind, "shape": list(e.shape), "dtype": e.dtype}
            if e.kind == "lowrank":
                rec["rank"] = e.rank
            if e.sections:
                rec["sections"] = {k: list(v) for k, v in e.sections.items()}
            layers[name] = rec
        header = {
            "version": FORMAT_VERSION,
            "config": self.config.to_json(),
            "budget": self.budget,
            "lambda": self.lambda_star,
            "crc32": self.crc32,
            "layers": layers,
        }
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def compute_residual(base: TensorMap, finetuned: TensorMap) -> tuple[TensorMap, list[str]]:
    """Per-tensor difference in 32-bit precision.

    Returns (residuals, unmatched) where ``unmatched`` lists fine-tuned
    tensors with no same-name, same-shape, same-dtype counterpart in the
    base map; those are destined for raw storage.
    """
    residuals: dict[str, np.ndarray] = {}
    unmatched: list[str] = []
    for name, ft in finetuned.items():
        if name not in base or base[name].shape != ft.shape or base[name].dtype != ft.dtype:
            unmatched.append(name)
            continue
        residuals[name] = ft.astype(np.float32) - base[name].astype(np.float32)
    return TensorMap(residuals), unmatched


def _le_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def _encode_lowrank_payload(full_factors, rank: int, config: EreConfig) -> dict[str, bytes]:
    if rank == 0:
        return {}
    factors = truncate(full_factors, rank)
    if not config.quantize:
        return {"u": _le_bytes(factors.u.astype(np.float32)),
                "d": _le_bytes(factors.d.astype(np.float32)),
                "v": _le_bytes(factors.v.astype(np.float32))}
    qu = quantize(factors.u, config.bits)
    qv = quantize(factors.v, config.bits)
    return {"u_codes": qu.codes.tobytes(),
            "u_scales": _le_bytes(qu.scales),
            "d": _le_bytes(encode_half(factors.d)),
            "v_codes": qv.codes.tobytes(),
            "v_scales": _le_bytes(qv.scales)}


def encode(base: TensorMap, finetuned: TensorMap, config: EreConfig,
           threads: int = 1) -> EreArchive:
    """Compress the residual between two weight maps into an archive.

    Every fine-tuned tensor appears exactly once: matched 2-D tensors of
    eligible size go through the low-rank pipeline, exactly-zero residuals
    are recorded without payload, and everything else (no counterpart,
    shape/dtype mismatch, excluded by glob, too small, not 2-D) is stored
    raw at ``config.raw_dtype`` precision.
    """
    residuals, unmatched = compute_residual(base, finetuned)
    raw_names = set(unmatched)
    zero_names: set[str] = set()
    candidates: list[str] = []
    for name in finetuned:
        if name in raw_names:
            continue
        if any(fnmatch.fnmatchcase(name, pat) for pat in config.exclude):
            raw_names.add(name)
            continue
        delta = residuals[name]
        if not delta.any():
            zero_names.add(name)
        elif delta.ndim == 2 and min(delta.shape) >= config.min_dim_eligible:
            candidates.append(name)
        else:
            raw_names.add(name)

    # one SVD per layer: its spectrum drives the allocation and its factors
    # are re-truncated to the allocated rank afterward
    workers = max(1, int(threads))
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            factors = dict(zip(candidates,
                               pool.map(lambda n: svd_full(residuals[n]), candidates)))
    else:
        factors = {name: svd_full(residuals[name]) for name in candidates}

    budget = lambda_star = None
    ranks: dict[str, int] = {}
    if candidates:
        profiles = [profile_from_singular_values(
            factors[name].d, *residuals[name].shape, name) for name in candidates]
        plan = allocate(profiles, AllocationConfig(
            prior_rank=config.prior_rank, alpha=config.alpha,
            lambda_tolerance=config.lambda_tolerance,
            min_dim_eligible=config.min_dim_eligible))
        budget, lambda_star, ranks = plan.budget, plan.lambda_star, plan.ranks

    payloads = {name: _encode_lowrank_payload(factors[name], ranks[name], config)
                for name in candidates}

    layers: dict[str, LayerEntry] = {}
    blob = bytearray()
    for name in finetuned:
        ft = finetuned[name]
        if name in zero_names:
            layers[name] = LayerEntry(name=name, kind="zero", shape=ft.shape,
                                      dtype="f16" if ft.dtype == np.float16 else "f32")
            continue
        if name in raw_names:
            store_dtype = "f16" if (config.raw_dtype == "f16" or ft.dtype == np.float16) else "f32"
            data = _le_bytes(ft.astype(_RAW_DTYPES[store_dtype]))
            offset = len(blob)
            blob.extend(data)
            layers[name] = LayerEntry(name=name, kind="raw", shape=ft.shape,
                                      dtype=store_dtype,
                                      sections={"data": (offset, len(data))})
            continue
        sections: dict[str, tuple[int, int]] = {}
        payload = payloads[name]
        for key in _SECTION_ORDER:
            if key in payload:
                offset = len(blob)
                blob.extend(payload[key])
                sections[key] = (offset, len(payload[key]))
        layers[name] = LayerEntry(name=name, kind="lowrank", shape=ft.shape,
                                  dtype="f16" if ft.dtype == np.float16 else "f32",
                                  rank=ranks[name], sections=sections)

    data = bytes(blob)
    return EreArchive(config=config, budget=budget, lambda_star=lambda_star,
                      layers=layers, data=data, crc32=zlib.crc32(data))


def write_ere(archive: EreArchive, path: str | Path) -> int:
    """Serialize an archive; returns bytes written."""
    header = archive.header_bytes()
    with open(path, "wb") as fh:
        fh.write(ERE_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(archive.data)
        return fh.tell()


def read_ere(path: str | Path, check_crc: bool = True) -> EreArchive:
    """Parse an ERE1 file, validating structure and the data checksum."""
    raw = Path(path).read_bytes()
    if raw[:4] != ERE_MAGIC:
        raise ArchiveError(f"bad magic {raw[:4]!r}; expected {ERE_MAGIC!r}")
    if len(raw) < 12:
        raise ArchiveError("truncated file: missing header length")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    if 12 + header_len > len(raw):
        raise ArchiveError("truncated file: header extends past end of file")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"invalid header JSON: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format version {header.get('version')!r}")
    data = raw[12 + header_len:]
    crc = header.get("crc32")
    if check_crc and zlib.crc32(data) != crc:
        raise ArchiveError("data section checksum mismatch (corrupted archive)")

    layers: dict[str, LayerEntry] = {}
    for name in sorted(header.get("layers", {})):
        rec = header["layers"][name]
        kind = rec.get("kind")
        if kind not in ("lowrank", "raw", "zero"):
            raise ArchiveError(f"layer {name!r}: unknown kind {kind!r}")
        sections = {}
        for key, (offset, nbytes) in rec.get("sections", {}).items():
            if offset < 0 or offset + nbytes > len(data):
                raise ArchiveError(f"layer {name!r}: section {key!r} out of bounds")
            sections[key] = (offset, nbytes)
        layers[name] = LayerEntry(name=name, kind=kind, shape=tuple(rec["shape"]),
                                  dtype=rec["dtype"], rank=rec.get("rank", 0),
                                  sections=sections)
    return EreArchive(config=EreConfig.from_json(header["config"]),
                      budget=header.get("budget"), lambda_star=header.get("lambda"),
                      layers=layers, data=data, crc32=crc)


def _decode_factor(archive: EreArchive, entry: LayerEntry, side: str,
                   rows: int, project: bool) -> np.ndarray:
    if not archive.config.quantize:
        flat = np.frombuffer(archive.section_bytes(entry, side), dtype="<f4")
        return flat.reshape(rows, entry.rank).astype(np.float64)
    codes = np.frombuffer(archive.section_bytes(entry, f"{side}_codes"), dtype=np.uint8)
    scales = np.frombuffer(archive.section_bytes(entry, f"{side}_scales"), dtype="<f2")
    qf = QuantizedFactor(bits=archive.config.bits, rows=rows, cols=entry.rank,
                         codes=codes, scales=scales)
    factor = dequantize(qf).astype(np.float64)
    return stiefel_project(factor, warn=False) if project else factor


def decode(base: TensorMap, archive: EreArchive, project: bool = True,
           threads: int = 1) -> TensorMap:
    """Reconstruct the fine-tuned weights from base + archive.

    Low-rank layers rebuild base + u @ diag(d) @ v.T from (optionally
    projected) dequantized factors; raw entries are copied through; zero
    entries return the base tensor unchanged. Output is identical at any
    thread count.
    """
    def rebuild(item: tuple[str, LayerEntry]) -> tuple[str, np.ndarray]:
        name, entry = item
        if entry.kind == "raw":
            flat = np.frombuffer(archive.section_bytes(entry, "data"),
                                 dtype=_RAW_DTYPES[entry.dtype])
            return name, flat.reshape(entry.shape)
        if name not in base:
            raise ArchiveError(f"layer {name!r} not present in the base map")
        ref = base[name]
        if ref.shape != entry.shape:
            raise ArchiveError(f"layer {name!r}: base shape {ref.shape} != "
                               f"archived shape {entry.shape}")
        if entry.kind == "zero" or entry.rank == 0:
            return name, ref
        n, m = entry.shape
        u = _decode_factor(archive, entry, "u", n, project)
        v = _decode_factor(archive, entry, "v", m, project)
        d_raw = archive.section_bytes(entry, "d")
        d = (np.frombuffer(d_raw, dtype="<f4") if not archive.config.quantize
             else decode_half(np.frombuffer(d_raw, dtype="<f2"))).astype(np.float64)
        recon = ref.astype(np.float64) + (u * d) @ v.T
        return name, recon.astype(ref.dtype)

    workers = max(1, int(threads))
    if workers > 1 and len(archive.layers) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = dict(pool.map(rebuild, archive.layers.items()))
    else:
        out = dict(map(rebuild, archive.layers.items()))
    return TensorMap(out)


@dataclass
class LayerSize:
    """Byte accounting for one layer."""

    name: str
    kind: str
    rank: int
    code_bytes: int
    scale_bytes: int
    d_bytes: int
    raw_bytes: int
    payload_bytes: int
    header_share: int
    fp32_bytes: int


@dataclass
class SizeReport:
    """Whole-archive byte accounting; totals are byte-exact vs the file."""

    layers: list[LayerSize]
    payload_bytes: int
    header_bytes: int
    file_bytes: int
    fp32_full_bytes: int
    fp32_residual_bytes: int

    @property
    def ratio_vs_full(self) -> float:
        return self.file_bytes / self.fp32_full_bytes if self.fp32_full_bytes else float("nan")

    @property
    def ratio_vs_residual(self) -> float:
        return (self.file_bytes / self.fp32_residual_bytes
                if self.fp32_residual_bytes else float("nan"))


def _layer_header_json(archive: EreArchive, name: str) -> str:
    e = archive.layers[name]
    rec = {"kind": e.kind, "shape": list(e.shape), "dtype": e.dtype}
    if e.kind == "lowrank":
        rec["rank"] = e.rank
    if e.sections:
        rec["sections"] = {k: list(v) for k, v in e.sections.items()}
    return json.dumps({name: rec}, sort_keys=True, separators=(",", ":"))


def size_report(archive: EreArchive) -> SizeReport:
    """Per-layer and total byte accounting for an archive."""
    rows: list[LayerSize] = []
    payload_total = fp32_full = fp32_residual = 0
    for name, e in archive.layers.items():
        sizes = {k: nbytes for k, (_, nbytes) in e.sections.items()}
        payload = sum(sizes.values())
        fp32 = int(np.prod(e.shape, dtype=np.int64)) * 4
        fp32_full += fp32
        if e.kind in ("lowrank", "zero"):
            fp32_residual += fp32
        payload_total += payload
        rows.append(LayerSize(
            name=name, kind=e.kind, rank=e.rank,
            code_bytes=(sizes.get("u_codes", 0) + sizes.get("v_codes", 0)
                        + sizes.get("u", 0) + sizes.get("v", 0)),
            scale_bytes=sizes.get("u_scales", 0) + sizes.get("v_scales", 0),
            d_bytes=sizes.get("d", 0),
            raw_bytes=sizes.get("data", 0),
            payload_bytes=payload,
            header_share=len(_layer_header_json(archive, name)) - 2,
            fp32_bytes=fp32))
    header_len = len(archive.header_bytes())
    return SizeReport(layers=rows, payload_bytes=payload_total,
                      header_bytes=header_len,
                      file_bytes=4 + 8 + header_len + len(archive.data),
                      fp32_full_bytes=fp32_full, fp32_residual_bytes=fp32_residual)


@dataclass
class LayerCheck:
    name: str
    kind: str
    rank: int
    rel_frobenius: float
    cosine: float
    passed: bool


@dataclass
class VerifyReport:
    """Reconstruction quality and integrity summary."""

    checksum_ok: bool
    budget_ok: bool
    layers: list[LayerCheck]
    max_rel_error: float
    mean_cosine: float
    passed: bool
    message: str = ""


def _rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    ref = float(np.linalg.norm(b.astype(np.float64)))
    err = float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))
    if ref == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / ref


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    fa = a.astype(np.float64).ravel()
    fb = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(fa @ fb / (na * nb))


def verify(base: TensorMap, finetuned: TensorMap, ere_path: str | Path,
           tol: float = 1e-2) -> VerifyReport:
    """Check an on-disk archive against the original weight pair.

    Reports per-layer relative Frobenius reconstruction error and
    flattened-weight cosine similarity, the checksum, and the budget
    constraint; never raises on a bad archive, failures become report
    entries.
    """
    try:
        archive = read_ere(ere_path)
    except ArchiveError as exc:
        return VerifyReport(checksum_ok=False, budget_ok=False, layers=[],
                            max_rel_error=float("inf"), mean_cosine=0.0,
                            passed=False, message=str(exc))
    decoded = decode(base, archive)
    checks: list[LayerCheck] = []
    for name, entry in archive.layers.items():
        rel = _rel_frobenius(decoded[name], finetuned[name])
        cos = _cosine(decoded[name], finetuned[name])
        checks.append(LayerCheck(name=name, kind=entry.kind, rank=entry.rank,
                                 rel_frobenius=rel, cosine=cos, passed=rel <= tol))
    lowrank_cost = sum(e.rank * (e.shape[0] + e.shape[1])
                       for e in archive.layers.values() if e.kind == "lowrank")
    budget_ok = archive.budget is None or lowrank_cost <= archive.budget
    max_rel = max((c.rel_frobenius for c in checks), default=0.0)
    mean_cos = float(np.mean([c.cosine for c in checks])) if checks else 1.0
    passed = budget_ok and all(c.passed for c in checks)
    return VerifyReport(checksum_ok=True, budget_ok=budget_ok, layers=checks,
                        max_rel_error=max_rel, mean_cosine=mean_cos, passed=passed)
