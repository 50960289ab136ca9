"""Checkpoint container: named f32/f64 tensors plus a group manifest.

File layout::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]

The header is ``{"tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
"manifest": {group: [names]}, "meta": {key: str}}``. Offsets are relative to
the end of the header; payloads are contiguous, row-major, little-endian,
written in sorted-name order.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "Checkpoint",
    "ModelManifest",
    "CompatReport",
    "load_checkpoint",
    "save_checkpoint",
    "dumps_checkpoint",
    "loads_checkpoint",
    "check_compat",
    "validate_manifest",
]

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}
_LAYER_RE = re.compile(r"^layer\.(\d+)$")

ModelManifest = dict  # group name -> list of tensor names


class CheckpointError(ValueError):
    """Raised for malformed containers or invalid checkpoints."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    manifest: dict[str, list[str]] = field(
        default_factory=lambda: {"downsampling": [], "head": []}
    )
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_NAMES:
                raise CheckpointError(
                    f"tensor {name!r}: unsupported dtype {arr.dtype}"
                )
            fixed[name] = arr
        self.tensors = fixed

    @property
    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def group_of(self, name: str) -> str:
        for group, members in self.manifest.items():
            if name in members:
                return group
        raise KeyError(name)

    def layer_groups(self) -> list[str]:
        """Backbone layer group names ordered by index."""
        idx = sorted(
            int(m.group(1)) for g in self.manifest if (m := _LAYER_RE.match(g))
        )
        return [f"layer.{k}" for k in idx]

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            {k: v.copy() for k, v in self.tensors.items()},
            {g: list(m) for g, m in self.manifest.items()},
            dict(self.meta),
        )

    def equals(self, other: "Checkpoint") -> bool:
        """Exact equality of tensors (bitwise), manifest and meta."""
        if self.manifest != other.manifest or self.meta != other.meta:
            return False
        if list(sorted(self.tensors)) != list(sorted(other.tensors)):
            return False
        for name, arr in self.tensors.items():
            o = other.tensors[name]
            if arr.dtype != o.dtype or arr.shape != o.shape:
                return False
            if arr.tobytes() != o.tobytes():
                return False
        return True


def validate_manifest(tensors: dict, manifest: dict) -> None:
    for reserved in ("downsampling", "head"):
        if reserved not in manifest:
            raise CheckpointError(f"manifest lacks required group {reserved!r}")
    seen: dict[str, str] = {}
    for group, members in manifest.items():
        for name in members:
            if name not in tensors:
                raise CheckpointError(
                    f"manifest group {group!r} names missing tensor {name!r}"
                )
            if name in seen:
                raise CheckpointError(
                    f"tensor {name!r} in groups {seen[name]!r} and {group!r}"
                )
            seen[name] = group
    orphans = sorted(set(tensors) - set(seen))
    if orphans:
        raise CheckpointError(f"tensors not in any manifest group: {orphans}")
    idx = sorted(int(m.group(1)) for g in manifest if (m := _LAYER_RE.match(g)))
    if idx != list(range(len(idx))):
        raise CheckpointError(f"layer indices not contiguous from 0: {idx}")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise CheckpointError(f"tensor {name!r} contains non-finite values")


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize to canonical container bytes."""
    validate_manifest(ckpt.tensors, ckpt.manifest)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        code = _DTYPE_NAMES[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        entries[name] = {
            "dtype": code,
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    header = {
        "tensors": entries,
        "manifest": {g: list(m) for g, m in ckpt.manifest.items()},
        "meta": {str(k): str(v) for k, v in ckpt.meta.items()},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def _no_dup_pairs(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise CheckpointError(f"duplicate key in header: {k!r}")
        out[k] = v
    return out


def loads_checkpoint(data: bytes, allow_nonfinite: bool = False) -> Checkpoint:
    """Parse and validate container bytes."""
    if len(data) < 8:
        raise CheckpointError("malformed header: file shorter than 8 bytes")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise CheckpointError("malformed header: header length exceeds file size")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_dup_pairs)
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict):
        raise CheckpointError("malformed header: missing 'tensors' object")

    payload = memoryview(data)[8 + n :]
    tensors = {}
    expected_offset = 0
    entries = sorted(header["tensors"].items(), key=lambda kv: kv[1].get("offset", -1))
    for name, info in entries:
        try:
            dtype = DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            offset, nbytes = int(info["offset"]), int(info["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed header entry for {name!r}: {exc}") from None
        if any(s < 1 for s in shape):
            raise CheckpointError(f"tensor {name!r}: shape must be positive, got {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        if nbytes != count * dtype.itemsize:
            raise CheckpointError(
                f"tensor {name!r}: payload length mismatch "
                f"(shape needs {count * dtype.itemsize} bytes, header says {nbytes})"
            )
        if offset != expected_offset:
            raise CheckpointError(
                f"tensor {name!r}: offset {offset} breaks contiguity (expected {expected_offset})"
            )
        if offset + nbytes > len(payload):
            raise CheckpointError(f"tensor {name!r}: payload length mismatch (truncated)")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
        arr = arr.astype(dtype.newbyteorder("="), copy=True)
        if not allow_nonfinite:
            _check_finite(name, arr)
        tensors[name] = arr
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CheckpointError(
            f"payload length mismatch: {len(payload) - expected_offset} trailing bytes"
        )

    manifest = header.get("manifest", {"downsampling": [], "head": []})
    meta = header.get("meta", {})
    if not isinstance(manifest, dict) or not isinstance(meta, dict):
        raise CheckpointError("malformed header: manifest/meta must be objects")
    manifest = {g: list(m) for g, m in manifest.items()}
    validate_manifest(tensors, manifest)
    ordered = {k: tensors[k] for k in sorted(tensors)}
    return Checkpoint(ordered, manifest, {str(k): str(v) for k, v in meta.items()})


def load_checkpoint(path, allow_nonfinite: bool = False) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), allow_nonfinite=allow_nonfinite)


@dataclass
class CompatReport:
    missing_in_b: list[str] = field(default_factory=list)
    missing_in_a: list[str] = field(default_factory=list)
    shape_mismatch: list[tuple[str, tuple, tuple]] = field(default_factory=list)
    dtype_mismatch: list[tuple[str, str, str]] = field(default_factory=list)

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(
            self.missing_in_b or self.missing_in_a or self.shape_mismatch or self.dtype_mismatch
        )

    @property
    def compatible(self) -> bool:
        return not self

    @property
    def entries(self) -> list[str]:
        out = [f"missing in b: {n}" for n in self.missing_in_b]
        out += [f"missing in a: {n}" for n in self.missing_in_a]
        out += [f"shape mismatch: {n} {sa} vs {sb}" for n, sa, sb in self.shape_mismatch]
        out += [f"dtype mismatch: {n} {da} vs {db}" for n, da, db in self.dtype_mismatch]
        return out

    def to_dict(self) -> dict:
        return {
            "compatible": self.compatible,
            "missing_in_b": self.missing_in_b,
            "missing_in_a": self.missing_in_a,
            "shape_mismatch": [[n, list(a), list(b)] for n, a, b in self.shape_mismatch],
            "dtype_mismatch": [list(e) for e in self.dtype_mismatch],
        }


def check_compat(a: Checkpoint, b: Checkpoint) -> CompatReport:
    """List every name/shape/dtype difference between two checkpoints."""
    rep = CompatReport()
    rep.missing_in_b = sorted(set(a.tensors) - set(b.tensors))
    rep.missing_in_a = sorted(set(b.tensors) - set(a.tensors))
    for name in sorted(set(a.tensors) & set(b.tensors)):
        ta, tb = a.tensors[name], b.tensors[name]
        if ta.shape != tb.shape:
            rep.shape_mismatch.append((name, ta.shape, tb.shape))
        if ta.dtype != tb.dtype:
            rep.dtype_mismatch.append((name, _DTYPE_NAMES[ta.dtype], _DTYPE_NAMES[tb.dtype]))
    return rep
