"""Checkpoint <-> TSA1 conversion with a rename/dtype-policy manifest."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import (ContainerError, read_safetensors, read_torch_checkpoint,
                         sniff_format, write_safetensors)
from .tsa import read_tsa, write_tsa

DEFAULT_CASTS = {"f64": "f32", "bf16": "f32"}
LOSSLESS_CASTS = {("bf16", "f32")}  # widening; every value representable


class ManifestError(ValueError):
    pass


@dataclass
class ConversionManifest:
    """Name mapping rules and dtype policy for a conversion.

    ``renames`` is a list of [from_glob, to_glob] pairs applied in order;
    the first matching pair wins and '*' captures carry over. ``casts``
    maps a source dtype tag to the stored dtype; sources missing from the
    map (and not f32/f16) are rejected.
    """

    renames: list[tuple[str, str]] = field(default_factory=list)
    casts: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CASTS))

    @classmethod
    def load(cls, path: str | Path | None) -> "ConversionManifest":
        if path is None:
            return cls()
        spec = json.loads(Path(path).read_text())
        manifest = cls()
        manifest.renames = [tuple(pair) for pair in spec.get("renames", [])]
        if "casts" in spec:
            manifest.casts = dict(spec["casts"])
        for pattern, template in manifest.renames:
            if pattern.count("*") != template.count("*"):
                raise ManifestError(
                    f"rename pair {pattern!r} -> {template!r} has mismatched wildcards")
        for target in manifest.casts.values():
            if target not in ("f32", "f16"):
                raise ManifestError(f"cast target must be f32 or f16, got {target!r}")
        return manifest

    def inverted(self) -> "ConversionManifest":
        inv = ConversionManifest(casts=dict(self.casts))
        inv.renames = [(to, frm) for frm, to in self.renames]
        return inv


def _apply_rename(name: str, renames: list[tuple[str, str]]) -> str:
    for pattern, template in renames:
        regex = re.compile("^" + "(.*)".join(re.escape(p) for p in pattern.split("*")) + "$")
        match = regex.match(name)
        if match is None:
            continue
        parts = template.split("*")
        out = parts[0]
        for captured, part in zip(match.groups(), parts[1:]):
            out += captured + part
        return out
    return name


def _apply_policy(name: str, source_tag: str, arr: np.ndarray | None,
                  casts: dict[str, str]):
    """Returns (stored array, cast record or None); raises without a policy."""
    if arr is None or source_tag not in ("f32", "f16", *casts):
        raise ContainerError(
            f"tensor {name!r} has dtype {source_tag!r} and no cast policy covers it")
    if source_tag in ("f32", "f16") and source_tag not in casts:
        return arr, None
    target = casts.get(source_tag, source_tag)
    out = arr.astype(np.float32 if target == "f32" else np.float16)
    if source_tag == target:
        return out, None
    lossy = (source_tag, target) not in LOSSLESS_CASTS \
        and not np.array_equal(out.astype(arr.dtype, copy=False), arr)
    return out, {"from": source_tag, "to": target, "lossy": bool(lossy)}


def to_tsa(checkpoint: str | Path, out_path: str | Path,
           manifest: ConversionManifest | None = None) -> dict:
    """Convert a checkpoint container to a TSA1 file.

    Writes ``out_path`` plus a sibling ``<out_path>.manifest.json``
    describing the source format and every applied cast and rename.
    Returns the emitted manifest record.
    """
    manifest = manifest or ConversionManifest()
    fmt = sniff_format(checkpoint)
    if fmt == "safetensors":
        source = read_safetensors(checkpoint)
    else:
        source = read_torch_checkpoint(checkpoint)

    tensors: dict[str, np.ndarray] = {}
    record = {"source_format": fmt, "source": str(checkpoint),
              "casts": {}, "renames": {}}
    for name, (tag, arr) in source.items():
        new_name = _apply_rename(name, manifest.renames)
        if new_name != name:
            record["renames"][name] = new_name
        if new_name in tensors:
            raise ManifestError(f"rename rules collide on {new_name!r}")
        stored, cast = _apply_policy(name, tag, arr, manifest.casts)
        if cast is not None:
            record["casts"][new_name] = cast
        tensors[new_name] = stored
    write_tsa(tensors, out_path)
    Path(f"{out_path}.manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def from_tsa(tsa_path: str | Path, out_path: str | Path,
             manifest: ConversionManifest | None = None) -> dict:
    """Convert a TSA1 file back to a safetensors checkpoint.

    Rename rules are applied inverted, so a manifest used for ``to_tsa``
    restores the original names. Values are written exactly (f32/f16
    round-trip bit-for-bit); the pickle container is read-only and cannot
    be a target.
    """
    manifest = (manifest or ConversionManifest()).inverted()
    tensors = read_tsa(tsa_path)
    renamed: dict[str, np.ndarray] = {}
    record = {"source": str(tsa_path), "renames": {}}
    for name, arr in tensors.items():
        new_name = _apply_rename(name, manifest.renames)
        if new_name != name:
            record["renames"][name] = new_name
        if new_name in renamed:
            raise ManifestError(f"rename rules collide on {new_name!r}")
        renamed[new_name] = arr
    write_safetensors(renamed, out_path)
    return record
