"""Checkpoint container I/O in the safetensors layout.

A file is an 8-byte little-endian header length, a JSON header mapping tensor
names to ``{dtype, shape, data_offsets}`` (plus an optional ``__metadata__``
string map), and a raw little-endian data block. Tensors are held in memory as
flat float32 buffers regardless of storage dtype; the original dtype is kept in
:class:`TensorMeta` so it can be restored on save.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    DowncastOverflowWarning,
    FormatError,
    IntegrityError,
    ValidationError,
)

DTYPES = ("float32", "float16", "bfloat16")
_DTYPE_TAG = {"float32": "F32", "float16": "F16", "bfloat16": "BF16"}
_TAG_DTYPE = {v: k for k, v in _DTYPE_TAG.items()}
_DTYPE_SIZE = {"float32": 4, "float16": 2, "bfloat16": 2}

_MAX_HEADER_BYTES = 100 * 1024 * 1024


@dataclass(frozen=True)
class TensorMeta:
    """Name, shape, storage dtype and container position of one tensor."""

    name: str
    shape: tuple[int, ...]
    dtype: str
    byte_offset: int
    byte_length: int

    @property
    def num_elements(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class SchemaDiff:
    """Result of comparing two checkpoints by tensor name and shape."""

    only_in_a: tuple[str, ...]
    only_in_b: tuple[str, ...]
    shape_mismatched: tuple[str, ...]

    @property
    def is_empty(self) -> bool:
        return not (self.only_in_a or self.only_in_b or self.shape_mismatched)

    def describe(self) -> str:
        if self.is_empty:
            return "schemas match"
        parts = []
        if self.only_in_a:
            parts.append("only in first: " + ", ".join(self.only_in_a))
        if self.only_in_b:
            parts.append("only in second: " + ", ".join(self.only_in_b))
        if self.shape_mismatched:
            parts.append("shape mismatch: " + ", ".join(self.shape_mismatched))
        return "; ".join(parts)


def _fresh_meta(name: str, shape: tuple[int, ...], dtype: str) -> TensorMeta:
    return TensorMeta(
        name=name,
        shape=shape,
        dtype=dtype,
        byte_offset=0,
        byte_length=math.prod(shape) * _DTYPE_SIZE[dtype],
    )


class ParameterSet:
    """An immutable, lexicographically ordered map from tensor name to values.

    Values are flat float32 buffers; shapes and storage dtypes live in the
    per-tensor :class:`TensorMeta`. Instances are safe to share across threads.
    """

    __slots__ = ("_entries", "source_path", "metadata")

    def __init__(
        self,
        entries: Mapping[str, tuple[TensorMeta, np.ndarray]],
        source_path: str | None = None,
        metadata: Mapping[str, str] | None = None,
    ):
        ordered: dict[str, tuple[TensorMeta, np.ndarray]] = {}
        for name in sorted(entries):
            meta, values = entries[name]
            values = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
            if values.size != meta.num_elements:
                raise IntegrityError(
                    f"tensor '{name}': buffer has {values.size} elements, "
                    f"shape {list(meta.shape)} implies {meta.num_elements}"
                )
            values.flags.writeable = False
            ordered[name] = (meta, values)
        self._entries = ordered
        self.source_path = source_path
        self.metadata = dict(metadata or {})

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        dtypes: Mapping[str, str] | None = None,
        source_path: str | None = None,
        metadata: Mapping[str, str] | None = None,
        allow_nonfinite: bool = False,
    ) -> "ParameterSet":
        """Build a set from shaped arrays, up-converting values to float32.

        Storage dtype defaults to the array's own dtype when it is one of the
        supported types, float32 otherwise; ``dtypes`` overrides per name.
        """
        entries = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if dtypes and name in dtypes:
                dtype = dtypes[name]
            elif arr.dtype == np.float16:
                dtype = "float16"
            else:
                dtype = "float32"
            if dtype not in DTYPES:
                raise ValidationError(f"tensor '{name}': unsupported dtype '{dtype}'")
            values = arr.astype(np.float32, copy=True).reshape(-1)
            if not allow_nonfinite and not np.all(np.isfinite(values)):
                raise ValidationError(f"tensor '{name}' contains non-finite values")
            entries[name] = (_fresh_meta(name, tuple(arr.shape), dtype), values)
        return cls(entries, source_path=source_path, metadata=metadata)

    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def values(self, name: str) -> np.ndarray:
        """Flat float32 buffer for one tensor (read-only)."""
        return self._entries[name][1]

    def shaped(self, name: str) -> np.ndarray:
        meta, values = self._entries[name]
        return values.reshape(meta.shape)

    def meta(self, name: str) -> TensorMeta:
        return self._entries[name][0]

    def items(self) -> Iterator[tuple[str, TensorMeta, np.ndarray]]:
        for name, (meta, values) in self._entries.items():
            yield name, meta, values

    def schema(self) -> tuple[tuple[str, tuple[int, ...], str], ...]:
        return tuple((m.name, m.shape, m.dtype) for m, _ in self._entries.values())

    def schema_fingerprint(self) -> str:
        """SHA-256 over (name, shape, dtype) triples; values are not hashed."""
        h = hashlib.sha256()
        for name, shape, dtype in self.schema():
            h.update(name.encode("utf-8"))
            h.update(b"\x1f")
            h.update(",".join(str(d) for d in shape).encode("ascii"))
            h.update(b"\x1f")
            h.update(dtype.encode("ascii"))
            h.update(b"\x1e")
        return h.hexdigest()

    def num_elements(self) -> int:
        return sum(m.num_elements for m, _ in self._entries.values())


def schema_compare(a: ParameterSet, b: ParameterSet) -> SchemaDiff:
    """Exhaustive name/shape diff between two sets (dtype is ignored)."""
    names_a, names_b = set(a.names()), set(b.names())
    mismatched = tuple(
        n for n in sorted(names_a & names_b) if a.meta(n).shape != b.meta(n).shape
    )
    return SchemaDiff(
        only_in_a=tuple(sorted(names_a - names_b)),
        only_in_b=tuple(sorted(names_b - names_a)),
        shape_mismatched=mismatched,
    )


def _f32_to_f16_bytes(name: str, values: np.ndarray) -> bytes:
    with np.errstate(over="ignore"):
        out = values.astype(np.float16)
    overflow = np.isinf(out) & np.isfinite(values)
    if np.any(overflow):
        warnings.warn(
            f"tensor '{name}': {int(overflow.sum())} value(s) exceed float16 range, "
            "saturating to +/-65504",
            DowncastOverflowWarning,
            stacklevel=3,
        )
        out = out.copy()
        out[overflow] = np.copysign(np.float16(65504.0), values[overflow])
    return out.astype("<f2").tobytes()


def _f32_to_bf16_bytes(name: str, values: np.ndarray) -> bytes:
    # Round to nearest even on the top 16 bits of the float32 pattern.
    bits = values.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = bits + np.uint32(0x7FFF) + lsb
    half = (rounded >> np.uint32(16)).astype(np.uint16)
    nan_in = np.isnan(values)
    if np.any(nan_in):
        half = half.copy()
        half[nan_in] = np.uint16(0x7FC0) | (
            (bits[nan_in] >> np.uint32(16)).astype(np.uint16) & np.uint16(0x8000)
        )
    exp = half & np.uint16(0x7F80)
    overflow = (exp == np.uint16(0x7F80)) & np.isfinite(values)
    if np.any(overflow):
        warnings.warn(
            f"tensor '{name}': {int(overflow.sum())} value(s) exceed bfloat16 range, "
            "saturating to the largest finite value",
            DowncastOverflowWarning,
            stacklevel=3,
        )
        half = half.copy()
        half[overflow] = (half[overflow] & np.uint16(0x8000)) | np.uint16(0x7F7F)
    return half.astype("<u2").tobytes()


def _decode_block(dtype: str, raw: bytes) -> np.ndarray:
    if dtype == "float32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if dtype == "float16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float32)
    # bfloat16: the value is the top half of a float32 bit pattern
    half = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (half << np.uint32(16)).view(np.float32).copy()


def _encode_values(name: str, values: np.ndarray, dtype: str) -> bytes:
    if dtype == "float32":
        return values.astype("<f4").tobytes()
    if dtype == "float16":
        return _f32_to_f16_bytes(name, values)
    return _f32_to_bf16_bytes(name, values)


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise FormatError(f"duplicate key in header: '{key}'")
        seen[key] = value
    return seen


def load_checkpoint(path: str, allow_nonfinite: bool = False) -> ParameterSet:
    """Load a checkpoint, up-converting every tensor to float32.

    Raises :class:`FormatError` for malformed headers, :class:`IntegrityError`
    for inconsistent sizes or offsets, and :class:`ValidationError` for
    non-finite values unless ``allow_nonfinite`` is set.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for header length (byte 0)")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > _MAX_HEADER_BYTES or 8 + header_len > len(blob):
        raise FormatError(
            f"{path}: header length {header_len} exceeds file size (byte 0)"
        )
    try:
        header = json.loads(
            blob[8 : 8 + header_len].decode("utf-8"),
            object_pairs_hook=_reject_duplicate_keys,
        )
    except FormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON (byte 8): {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object (byte 8)")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: __metadata__ must map strings to strings")

    data = blob[8 + header_len :]
    entries: dict[str, tuple[TensorMeta, np.ndarray]] = {}
    spans: list[tuple[int, int, str]] = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise FormatError(f"{path}: entry '{name}' is not an object")
        try:
            tag = info["dtype"]
            shape = info["shape"]
            begin, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: entry '{name}' is missing fields: {exc}") from exc
        if tag not in _TAG_DTYPE:
            raise FormatError(f"{path}: tensor '{name}' has unsupported dtype '{tag}'")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and d >= 0 for d in shape
        ):
            raise FormatError(f"{path}: tensor '{name}' has invalid shape {shape!r}")
        dtype = _TAG_DTYPE[tag]
        expected = math.prod(shape) * _DTYPE_SIZE[dtype]
        if not (isinstance(begin, int) and isinstance(end, int)) or begin < 0 or end < begin:
            raise FormatError(f"{path}: tensor '{name}' has invalid data_offsets")
        if end - begin != expected:
            raise IntegrityError(
                f"{path}: tensor '{name}' declares {end - begin} bytes, "
                f"shape {shape} with dtype {dtype} requires {expected}"
            )
        if end > len(data):
            raise IntegrityError(
                f"{path}: tensor '{name}' extends past the data block "
                f"({end} > {len(data)})"
            )
        spans.append((begin, end, name))
        values = _decode_block(dtype, data[begin:end])
        if not allow_nonfinite and not np.all(np.isfinite(values)):
            raise ValidationError(
                f"{path}: tensor '{name}' contains non-finite values "
                "(pass allow_nonfinite to load anyway)"
            )
        meta = TensorMeta(
            name=name,
            shape=tuple(shape),
            dtype=dtype,
            byte_offset=begin,
            byte_length=end - begin,
        )
        entries[name] = (meta, values)

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise IntegrityError(
                f"{path}: tensors '{n0}' and '{n1}' overlap in the data block"
            )

    return ParameterSet(entries, source_path=path, metadata=metadata)


def save_checkpoint(ps: ParameterSet, path: str, dtype_policy: str = "preserve") -> None:
    """Write a checkpoint container.

    ``preserve`` down-converts each tensor to its recorded storage dtype with
    round-to-nearest-even (finite overflow saturates and warns); ``force_f32``
    writes everything as float32 so a reload is bit-exact.
    """
    if dtype_policy not in ("preserve", "force_f32"):
        raise ValidationError(f"unknown dtype_policy '{dtype_policy}'")
    header: dict = {}
    if ps.metadata:
        header["__metadata__"] = dict(ps.metadata)
    blocks: list[bytes] = []
    offset = 0
    for name, meta, values in ps.items():
        dtype = meta.dtype if dtype_policy == "preserve" else "float32"
        raw = _encode_values(name, values, dtype)
        header[name] = {
            "dtype": _DTYPE_TAG[dtype],
            "shape": list(meta.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blocks.append(raw)
        offset += len(raw)
    payload = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blocks:
            fh.write(raw)
