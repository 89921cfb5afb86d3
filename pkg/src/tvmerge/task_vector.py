"""Task vectors: parameter deltas between a fine-tuned checkpoint and its base.

A task vector stores ``tuned - base`` per tensor together with the label of the
capability it encodes and a fingerprint of the base schema it was extracted
against. Applying it back is plain elementwise arithmetic; no operation here
ever computes a gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ProvenanceError, SchemaMismatchError, UndefinedMetricError
from .tensor_store import ParameterSet, TensorMeta, load_checkpoint, save_checkpoint, schema_compare

CREATOR_VERSION = "tvmerge 0.1.0"

_METADATA_KEYS = ("label", "base_fingerprint", "creator_version")


@dataclass(frozen=True)
class TaskVector:
    """Delta values plus provenance; structure mirrors the base checkpoint."""

    data: ParameterSet
    label: str
    base_fingerprint: str

    def names(self) -> tuple[str, ...]:
        return self.data.names()

    def values(self, name: str) -> np.ndarray:
        return self.data.values(name)

    def meta(self, name: str) -> TensorMeta:
        return self.data.meta(name)

    def __contains__(self, name: str) -> bool:
        return name in self.data

    def num_elements(self) -> int:
        return self.data.num_elements()


@dataclass
class TensorStats:
    l2_norm: float
    max_abs: float
    zero_fraction: float
    histogram_counts: list[int]
    histogram_edges: list[float]


@dataclass
class VectorStats:
    per_tensor: dict[str, TensorStats] = field(default_factory=dict)
    global_stats: TensorStats | None = None


def _raise_schema_mismatch(diff, what_a: str, what_b: str) -> None:
    parts = []
    if diff.only_in_a:
        parts.append(f"only in {what_a}: {', '.join(diff.only_in_a)}")
    if diff.only_in_b:
        parts.append(f"only in {what_b}: {', '.join(diff.only_in_b)}")
    if diff.shape_mismatched:
        parts.append(f"shape mismatch: {', '.join(diff.shape_mismatched)}")
    raise SchemaMismatchError(
        "schema mismatch: " + "; ".join(parts),
        only_in_a=diff.only_in_a,
        only_in_b=diff.only_in_b,
        shape_mismatched=diff.shape_mismatched,
    )


def extract(
    base: ParameterSet,
    tuned: ParameterSet,
    label: str,
    allow_missing: bool = False,
) -> TaskVector:
    """Compute ``tuned - base`` elementwise for every tensor.

    In strict mode (the default) the schemas must match exactly; the error
    lists every offending tensor name. With ``allow_missing``, tensors absent
    from the tuned checkpoint get a zero delta (so applying the vector passes
    the base through untouched) and tensors only in the tuned checkpoint are
    ignored. Shape mismatches are always errors.
    """
    diff = schema_compare(base, tuned)
    if not diff.is_empty:
        if not allow_missing or diff.shape_mismatched:
            _raise_schema_mismatch(diff, "base", "tuned")
    arrays = {}
    dtypes = {}
    for name, meta, base_values in base.items():
        if name in tuned:
            delta = np.subtract(tuned.values(name), base_values, dtype=np.float32)
        else:
            delta = np.zeros(meta.num_elements, dtype=np.float32)
        arrays[name] = delta.reshape(meta.shape)
        dtypes[name] = meta.dtype
    data = ParameterSet.from_arrays(arrays, dtypes=dtypes)
    return TaskVector(data=data, label=label, base_fingerprint=base.schema_fingerprint())


def apply(
    base: ParameterSet,
    tv: TaskVector,
    scale: float = 1.0,
    allow_missing: bool = False,
    allow_fingerprint_mismatch: bool = False,
) -> ParameterSet:
    """Return ``base + scale * tv`` as a new checkpoint; the base is untouched."""
    if tv.base_fingerprint and not allow_fingerprint_mismatch:
        if tv.base_fingerprint != base.schema_fingerprint():
            raise ProvenanceError(
                f"task vector '{tv.label}' was extracted against a different base "
                "(pass allow_fingerprint_mismatch to apply anyway)"
            )
    diff = schema_compare(base, tv.data)
    if not diff.is_empty:
        if diff.shape_mismatched or diff.only_in_b or (diff.only_in_a and not allow_missing):
            _raise_schema_mismatch(diff, "base", "vector")
    scale32 = np.float32(scale)
    arrays = {}
    dtypes = {}
    for name, meta, base_values in base.items():
        if name in tv and scale32 != 0:
            arrays[name] = (base_values + scale32 * tv.values(name)).reshape(meta.shape)
        else:
            arrays[name] = base_values.copy().reshape(meta.shape)
        dtypes[name] = meta.dtype
    return ParameterSet.from_arrays(arrays, dtypes=dtypes)


def _tensor_stats(values: np.ndarray, max_abs: float | None = None) -> TensorStats:
    if values.size == 0:
        return TensorStats(0.0, 0.0, 0.0, [], [0.0, 0.0])
    if max_abs is None:
        max_abs = float(np.max(np.abs(values)))
    hist_range = (-max_abs, max_abs) if max_abs > 0 else (-0.5, 0.5)
    counts, edges = np.histogram(values, bins=16, range=hist_range)
    return TensorStats(
        l2_norm=float(np.linalg.norm(values.astype(np.float64))),
        max_abs=max_abs,
        zero_fraction=float(np.count_nonzero(values == 0) / values.size),
        histogram_counts=counts.tolist(),
        histogram_edges=edges.tolist(),
    )


def stats(tv: TaskVector) -> VectorStats:
    """Per-tensor and global L2 norm, max magnitude, zero fraction, histogram."""
    out = VectorStats()
    total = tv.num_elements()
    if total == 0:
        out.global_stats = TensorStats(0.0, 0.0, 0.0, [], [0.0, 0.0])
        return out
    global_max = 0.0
    for name in tv.names():
        s = _tensor_stats(tv.values(name))
        out.per_tensor[name] = s
        global_max = max(global_max, s.max_abs)
    sq_sum = 0.0
    zeros = 0
    hist_range = (-global_max, global_max) if global_max > 0 else (-0.5, 0.5)
    counts = np.zeros(16, dtype=np.int64)
    edges = np.histogram_bin_edges([], bins=16, range=hist_range)
    for name in tv.names():
        values = tv.values(name)
        sq_sum += float(np.sum(np.square(values, dtype=np.float64)))
        zeros += int(np.count_nonzero(values == 0))
        counts += np.histogram(values, bins=16, range=hist_range)[0]
    out.global_stats = TensorStats(
        l2_norm=float(np.sqrt(sq_sum)),
        max_abs=global_max,
        zero_fraction=zeros / total,
        histogram_counts=counts.tolist(),
        histogram_edges=edges.tolist(),
    )
    return out


def cosine(tv_a: TaskVector, tv_b: TaskVector) -> float:
    """Cosine similarity over the flattened concatenation of all tensors."""
    diff = schema_compare(tv_a.data, tv_b.data)
    if not diff.is_empty:
        _raise_schema_mismatch(diff, "first vector", "second vector")
    dot = 0.0
    sq_a = 0.0
    sq_b = 0.0
    for name in tv_a.names():
        a = tv_a.values(name).astype(np.float64)
        b = tv_b.values(name).astype(np.float64)
        dot += float(np.dot(a, b))
        sq_a += float(np.dot(a, a))
        sq_b += float(np.dot(b, b))
    if sq_a == 0.0 or sq_b == 0.0:
        raise UndefinedMetricError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(dot / math.sqrt(sq_a * sq_b), -1.0, 1.0))


def save_vector(tv: TaskVector, path: str) -> None:
    """Write a task vector as a float32 checkpoint with provenance metadata."""
    ps = ParameterSet(
        {name: (tv.meta(name), tv.values(name)) for name in tv.names()},
        metadata={
            "label": tv.label,
            "base_fingerprint": tv.base_fingerprint,
            "creator_version": CREATOR_VERSION,
        },
    )
    save_checkpoint(ps, path, dtype_policy="force_f32")


def load_vector(path: str) -> TaskVector:
    ps = load_checkpoint(path)
    missing = [k for k in ("label", "base_fingerprint") if k not in ps.metadata]
    if missing:
        raise FormatError(
            f"{path}: not a task-vector container (missing metadata: {', '.join(missing)})"
        )
    return TaskVector(
        data=ps,
        label=ps.metadata["label"],
        base_fingerprint=ps.metadata["base_fingerprint"],
    )
