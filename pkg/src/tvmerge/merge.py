"""Training-free composition of task vectors onto a base checkpoint.

Four strategies are provided. Task arithmetic (``ta``) is a weighted sum of
deltas. ``ties`` trims each delta to its largest-magnitude entries, elects a
per-index dominant sign and sums only sign-consistent contributions. ``dare``
zeroes each entry independently with probability ``p`` and rescales survivors
by ``1/(1-p)`` so the fused delta is unbiased. ``average`` is the plain
parameter mean, the classic model-soup baseline.

One ``p`` field covers both sparsification knobs, with opposite polarity:
for ``ties`` it is the fraction RETAINED (0 < p <= 1), for ``dare`` it is the
probability DROPPED (0 <= p < 1). Both default to 0.5.

All floating arithmetic is float32 with a fixed summation order (the order the
vectors are given), so outputs are bitwise reproducible regardless of worker
count. Work streams one tensor at a time with a constant number of working
buffers, independent of how many vectors are merged. Drop decisions come from
a counter-based generator keyed by (seed, tensor name, flat index); the
per-vector seed is derived from the merge seed and the vector label, making
the result independent of argument order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, SchemaMismatchError, ValidationError
from .tensor_store import ParameterSet, schema_compare
from .task_vector import TaskVector, apply

STRATEGIES = ("ta", "ties", "dare", "average")
TRIM_SCOPES = ("per_tensor", "global")

SignMask = dict[str, np.ndarray]

_U64 = 0xFFFFFFFFFFFFFFFF
_ZERO32 = np.float32(0.0)


@dataclass
class MergeConfig:
    """Strategy selector and hyperparameters for a merge.

    ``alphas=None`` means equal weights 1/K. With ``normalize_alphas`` (the
    default) explicit weights are scaled to sum to 1.
    """

    strategy: str = "ta"
    alphas: Sequence[float] | None = None
    p: float = 0.5
    seed: int | None = None
    normalize_alphas: bool = True
    trim_scope: str = "per_tensor"
    allow_missing: bool = False

    def __post_init__(self):
        self.strategy = str(self.strategy).lower()
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy '{self.strategy}' (expected one of {', '.join(STRATEGIES)})"
            )
        if self.trim_scope not in TRIM_SCOPES:
            raise ConfigError(
                f"unknown trim_scope '{self.trim_scope}' (expected one of {', '.join(TRIM_SCOPES)})"
            )
        if not math.isfinite(self.p):
            raise ConfigError("p must be finite")

    def resolved_alphas(self, k: int) -> list[float]:
        if k < 1:
            raise ConfigError("at least one task vector is required")
        if self.alphas is None:
            return [1.0 / k] * k
        alphas = [float(a) for a in self.alphas]
        if len(alphas) != k:
            raise ConfigError(f"{len(alphas)} alphas given for {k} task vectors")
        if any(not math.isfinite(a) or a < 0 for a in alphas):
            raise ConfigError("alphas must be finite and non-negative")
        if self.normalize_alphas:
            total = sum(alphas)
            if total <= 0:
                raise ConfigError("alphas sum to zero; cannot normalize")
            alphas = [a / total for a in alphas]
        return alphas


@dataclass
class TensorMergeReport:
    name: str
    num_elements: int
    retained_fraction: float
    sign_conflicts: int
    contributors: list[int]


@dataclass
class MergeReport:
    strategy: str
    config: dict
    wall_time_s: float = 0.0
    tensors: list[TensorMergeReport] = field(default_factory=list)

    def lines(self):
        for t in self.tensors:
            contributors = ",".join(str(c) for c in t.contributors)
            yield (
                f"tensor={t.name} elements={t.num_elements} "
                f"retained={t.retained_fraction:.6f} "
                f"sign_conflicts={t.sign_conflicts} contributors={contributors}"
            )

    def to_json(self) -> str:
        doc = {
            "strategy": self.strategy,
            "config": self.config,
            "wall_time_s": self.wall_time_s,
            "tensors": [
                {
                    "name": t.name,
                    "elements": t.num_elements,
                    "retained_fraction": t.retained_fraction,
                    "sign_conflicts": t.sign_conflicts,
                    "contributors": t.contributors,
                }
                for t in self.tensors
            ],
        }
        return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# deterministic drop masks


def derive_vector_seed(seed: int, label: str) -> int:
    """Per-vector seed from the merge seed and the vector's label."""
    raw = label.encode("utf-8")
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & _U64))
    h.update(struct.pack("<Q", len(raw)))
    h.update(raw)
    return int.from_bytes(h.digest(), "little")


def _philox_key(seed: int, name: str) -> np.ndarray:
    raw = name.encode("utf-8")
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", seed & _U64))
    h.update(struct.pack("<Q", len(raw)))
    h.update(raw)
    return np.frombuffer(h.digest(), dtype="<u8")


def keep_mask(num_elements: int, p: float, seed: int, name: str) -> np.ndarray:
    """Boolean keep decisions for one tensor.

    The decision at flat index j depends only on (seed, name, j): the uniform
    stream comes from a counter-based Philox generator keyed by (seed, name),
    so masks are reproducible across runs, platforms and thread counts.
    """
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, name)))
    return gen.random(num_elements) >= p


def drop(tv: TaskVector, p: float, seed: int) -> TaskVector:
    """Independently zero each entry with probability ``p``; survivors unchanged."""
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"drop probability must be in [0, 1), got {p}")
    arrays = {}
    dtypes = {}
    for name in tv.names():
        meta = tv.meta(name)
        values = tv.values(name)
        mask = keep_mask(values.size, p, seed, name)
        arrays[name] = np.where(mask, values, _ZERO32).reshape(meta.shape)
        dtypes[name] = meta.dtype
    return TaskVector(
        data=ParameterSet.from_arrays(arrays, dtypes=dtypes),
        label=tv.label,
        base_fingerprint=tv.base_fingerprint,
    )


# ---------------------------------------------------------------------------
# trimming


def _keep_count(p: float, n: int) -> int:
    return min(n, int(math.ceil(p * n)))


def _tensor_trim_mask(values: np.ndarray, threshold: float, take_ties: int) -> np.ndarray:
    magnitudes = np.abs(values)
    mask = magnitudes > threshold
    if take_ties > 0:
        tie_idx = np.flatnonzero(magnitudes == threshold)[:take_ties]
        mask[tie_idx] = True
    return mask


def _trim_plan(tv: TaskVector, p: float, scope: str) -> dict[str, tuple[float, int]]:
    """Per-tensor (magnitude threshold, ties-to-keep) realizing the top-p keep.

    Entries strictly above the threshold are kept; of the entries exactly at
    the threshold, the first ``take`` in flat-index order (tensor names in
    lexicographic order for global scope) are kept, which makes tie-breaking
    deterministic.
    """
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"trim retention must be in (0, 1], got {p}")
    plan: dict[str, tuple[float, int]] = {}
    if scope == "per_tensor":
        for name in tv.names():
            values = tv.values(name)
            n = values.size
            if n == 0:
                plan[name] = (np.inf, 0)
                continue
            k = _keep_count(p, n)
            if k >= n:
                plan[name] = (-1.0, 0)  # every magnitude exceeds -1
                continue
            magnitudes = np.abs(values)
            threshold = float(np.partition(magnitudes, n - k)[n - k])
            above = int(np.count_nonzero(magnitudes > threshold))
            plan[name] = (threshold, k - above)
        return plan

    sizes = {name: tv.values(name).size for name in tv.names()}
    total = sum(sizes.values())
    if total == 0:
        return {name: (np.inf, 0) for name in tv.names()}
    k = _keep_count(p, total)
    if k >= total:
        return {name: (-1.0, 0) for name in tv.names()}
    magnitudes = np.concatenate([np.abs(tv.values(name)) for name in tv.names()])
    threshold = float(np.partition(magnitudes, total - k)[total - k])
    remaining = k - int(np.count_nonzero(magnitudes > threshold))
    del magnitudes
    for name in tv.names():
        ties_here = int(np.count_nonzero(np.abs(tv.values(name)) == threshold))
        take = min(remaining, ties_here)
        plan[name] = (threshold, take)
        remaining -= take
    return plan


def trim(tv: TaskVector, p: float, scope: str = "per_tensor") -> TaskVector:
    """Keep the ceil(p*n) largest-magnitude entries, zeroing the rest.

    ``scope='per_tensor'`` budgets within each tensor; ``'global'`` budgets
    across the whole vector. Threshold ties keep the lower flat index first.
    """
    if scope not in TRIM_SCOPES:
        raise ConfigError(f"unknown trim scope '{scope}'")
    plan = _trim_plan(tv, p, scope)
    arrays = {}
    dtypes = {}
    for name in tv.names():
        meta = tv.meta(name)
        values = tv.values(name)
        threshold, take = plan[name]
        mask = _tensor_trim_mask(values, threshold, take)
        arrays[name] = np.where(mask, values, _ZERO32).reshape(meta.shape)
        dtypes[name] = meta.dtype
    return TaskVector(
        data=ParameterSet.from_arrays(arrays, dtypes=dtypes),
        label=tv.label,
        base_fingerprint=tv.base_fingerprint,
    )


def elect_sign(trimmed: Sequence[TaskVector]) -> SignMask:
    """Per-index dominant direction: sign of the elementwise sum, 0 on exact ties."""
    if not trimmed:
        raise ConfigError("elect_sign requires at least one task vector")
    _check_vector_schemas(trimmed[0].data, trimmed, allow_missing=False)
    out: SignMask = {}
    for name in trimmed[0].names():
        total = trimmed[0].values(name).copy()
        for tv in trimmed[1:]:
            total += tv.values(name)
        out[name] = np.sign(total).astype(np.int8)
    return out


# ---------------------------------------------------------------------------
# merge strategies


def _check_vector_schemas(base: ParameterSet, tvs: Sequence[TaskVector], allow_missing: bool):
    if not tvs:
        raise ConfigError("at least one task vector is required")
    for tv in tvs:
        diff = schema_compare(base, tv.data)
        if diff.is_empty:
            continue
        if diff.shape_mismatched or diff.only_in_b or not allow_missing:
            raise SchemaMismatchError(
                f"task vector '{tv.label}' does not match the base schema: "
                + diff.describe(),
                only_in_a=diff.only_in_a,
                only_in_b=diff.only_in_b,
                shape_mismatched=diff.shape_mismatched,
            )


def _run_tensorwise(names: Sequence[str], fn: Callable, workers: int) -> list:
    if workers <= 1:
        return [fn(name) for name in names]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, names))


def _assemble(
    base: ParameterSet,
    results: list[tuple[str, np.ndarray, TensorMergeReport]],
) -> tuple[ParameterSet, list[TensorMergeReport]]:
    # builds the output set without re-copying the already-fresh buffers,
    # keeping peak memory at one output model plus per-tensor working arrays
    entries = {}
    reports = []
    for name, values, treport in results:
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"merged tensor '{name}' overflowed to non-finite values")
        entries[name] = (base.meta(name), values)
        reports.append(treport)
    return ParameterSet(entries), reports


def _passthrough(name: str, base_values: np.ndarray, k: int):
    treport = TensorMergeReport(name, base_values.size, 1.0, 0, [0] * (k + 1))
    return name, base_values.copy(), treport


def _report(strategy: str, cfg: MergeConfig, alphas: list[float], tvs, extra=None) -> MergeReport:
    config = {
        "strategy": strategy,
        "alphas": alphas,
        "p": cfg.p,
        "seed": cfg.seed,
        "normalize_alphas": cfg.normalize_alphas,
        "trim_scope": cfg.trim_scope,
        "allow_missing": cfg.allow_missing,
        "labels": [tv.label for tv in tvs],
    }
    if extra:
        config.update(extra)
    return MergeReport(strategy=strategy, config=config)


def merge_ta(
    base: ParameterSet,
    tvs: Sequence[TaskVector],
    cfg: MergeConfig,
    workers: int = 1,
) -> tuple[ParameterSet, MergeReport]:
    """Weighted vector addition: base + sum_i alpha_i * tau_i."""
    start = time.perf_counter()
    alphas = cfg.resolved_alphas(len(tvs))
    _check_vector_schemas(base, tvs, cfg.allow_missing)
    alphas32 = [np.float32(a) for a in alphas]
    k = len(tvs)

    def one(name: str):
        base_values = base.values(name)
        n = base_values.size
        present = [(a, tv) for a, tv in zip(alphas32, tvs) if name in tv]
        if not present or n == 0:
            return _passthrough(name, base_values, k)
        phi = None
        total = None
        contributors = np.zeros(n, dtype=np.int16)
        for a, tv in present:
            tau = tv.values(name)
            if phi is None:
                phi = a * tau
                total = tau.copy()
            else:
                phi += a * tau
                total += tau
            contributors += tau != 0
        elected = np.sign(total)
        conflict = np.zeros(n, dtype=bool)
        for _, tv in present:
            tau = tv.values(name)
            conflict |= (tau != 0) & (np.sign(tau) != elected)
        treport = TensorMergeReport(
            name=name,
            num_elements=n,
            retained_fraction=1.0,
            sign_conflicts=int(conflict.sum()),
            contributors=np.bincount(contributors, minlength=k + 1).tolist(),
        )
        return name, base_values + phi, treport

    results = _run_tensorwise(base.names(), one, workers)
    merged, tensor_reports = _assemble(base, results)
    report = _report("ta", cfg, alphas, tvs)
    report.tensors = tensor_reports
    report.wall_time_s = time.perf_counter() - start
    return merged, report


def merge_average(models: Sequence[ParameterSet]) -> ParameterSet:
    """Elementwise arithmetic mean of the given checkpoints."""
    if not models:
        raise ConfigError("at least one model is required")
    first = models[0]
    for other in models[1:]:
        diff = schema_compare(first, other)
        if not diff.is_empty:
            raise SchemaMismatchError(
                "models do not share one schema: " + diff.describe(),
                only_in_a=diff.only_in_a,
                only_in_b=diff.only_in_b,
                shape_mismatched=diff.shape_mismatched,
            )
    k = np.float32(len(models))
    arrays = {}
    dtypes = {}
    for name, meta, values in first.items():
        acc = values.copy()
        for other in models[1:]:
            acc += other.values(name)
        arrays[name] = (acc / k).reshape(meta.shape)
        dtypes[name] = meta.dtype
    return ParameterSet.from_arrays(arrays, dtypes=dtypes)


def merge_ties(
    base: ParameterSet,
    tvs: Sequence[TaskVector],
    cfg: MergeConfig,
    workers: int = 1,
) -> tuple[ParameterSet, MergeReport]:
    """Trim, elect sign, then sum only sign-consistent contributions.

    Per tensor this runs two streaming passes over the vectors (election needs
    the completed sum), recomputing the cheap trim masks instead of holding K
    trimmed copies alive.
    """
    start = time.perf_counter()
    alphas = cfg.resolved_alphas(len(tvs))
    _check_vector_schemas(base, tvs, cfg.allow_missing)
    plans = [_trim_plan(tv, cfg.p, cfg.trim_scope) for tv in tvs]
    alphas32 = [np.float32(a) for a in alphas]
    k = len(tvs)

    def one(name: str):
        base_values = base.values(name)
        n = base_values.size
        present = [
            (a, tv, plans[i][name])
            for i, (a, tv) in enumerate(zip(alphas32, tvs))
            if name in tv
        ]
        if not present or n == 0:
            return _passthrough(name, base_values, k)
        total = None
        kept_slots = 0
        for _, tv, (threshold, take) in present:
            tau = tv.values(name)
            mask = _tensor_trim_mask(tau, threshold, take)
            kept_slots += int(mask.sum())
            trimmed = np.where(mask, tau, _ZERO32)
            total = trimmed if total is None else total + trimmed
        elected = np.sign(total)
        phi = None
        conflict = np.zeros(n, dtype=bool)
        contributors = np.zeros(n, dtype=np.int16)
        for a, tv, (threshold, take) in present:
            tau = tv.values(name)
            trimmed = np.where(_tensor_trim_mask(tau, threshold, take), tau, _ZERO32)
            nonzero = trimmed != 0
            include = nonzero & (np.sign(trimmed) == elected)
            conflict |= nonzero & ~include
            contributors += include
            term = a * np.where(include, trimmed, _ZERO32)
            phi = term if phi is None else phi + term
        treport = TensorMergeReport(
            name=name,
            num_elements=n,
            retained_fraction=kept_slots / (len(present) * n),
            sign_conflicts=int(conflict.sum()),
            contributors=np.bincount(contributors, minlength=k + 1).tolist(),
        )
        return name, base_values + phi, treport

    results = _run_tensorwise(base.names(), one, workers)
    merged, tensor_reports = _assemble(base, results)
    report = _report("ties", cfg, alphas, tvs)
    report.tensors = tensor_reports
    report.wall_time_s = time.perf_counter() - start
    return merged, report


def merge_dare(
    base: ParameterSet,
    tvs: Sequence[TaskVector],
    cfg: MergeConfig,
    workers: int = 1,
) -> tuple[ParameterSet, MergeReport]:
    """Drop entries with probability p, fuse, rescale by 1/(1-p)."""
    start = time.perf_counter()
    alphas = cfg.resolved_alphas(len(tvs))
    _check_vector_schemas(base, tvs, cfg.allow_missing)
    if not (0.0 <= cfg.p < 1.0):
        raise ConfigError(f"dare drop probability must be in [0, 1), got {cfg.p}")
    if cfg.seed is None:
        raise ConfigError("dare requires an explicit seed for reproducible merges")
    seeds = [derive_vector_seed(cfg.seed, tv.label) for tv in tvs]
    factor = np.float32(1.0 / (1.0 - cfg.p))
    alphas32 = [np.float32(a) for a in alphas]
    k = len(tvs)

    def one(name: str):
        base_values = base.values(name)
        n = base_values.size
        present = [
            (a, tv, seeds[i])
            for i, (a, tv) in enumerate(zip(alphas32, tvs))
            if name in tv
        ]
        if not present or n == 0:
            return _passthrough(name, base_values, k)
        phi = None
        total = None
        kept_slots = 0
        contributors = np.zeros(n, dtype=np.int16)
        for a, tv, seed in present:
            tau = tv.values(name)
            mask = keep_mask(n, cfg.p, seed, name)
            kept_slots += int(mask.sum())
            tilde = np.where(mask, tau, _ZERO32)
            if phi is None:
                phi = a * tilde
                total = tilde.copy()
            else:
                phi += a * tilde
                total += tilde
            contributors += tilde != 0
        elected = np.sign(total)
        conflict = np.zeros(n, dtype=bool)
        for _, tv, seed in present:
            tau = tv.values(name)
            tilde = np.where(keep_mask(n, cfg.p, seed, name), tau, _ZERO32)
            conflict |= (tilde != 0) & (np.sign(tilde) != elected)
        treport = TensorMergeReport(
            name=name,
            num_elements=n,
            retained_fraction=kept_slots / (len(present) * n),
            sign_conflicts=int(conflict.sum()),
            contributors=np.bincount(contributors, minlength=k + 1).tolist(),
        )
        return name, base_values + factor * phi, treport

    results = _run_tensorwise(base.names(), one, workers)
    merged, tensor_reports = _assemble(base, results)
    report = _report("dare", cfg, alphas, tvs, extra={"vector_seeds": seeds})
    report.tensors = tensor_reports
    report.wall_time_s = time.perf_counter() - start
    return merged, report


def merge(
    base: ParameterSet,
    tvs: Sequence[TaskVector],
    cfg: MergeConfig,
    workers: int = 1,
) -> tuple[ParameterSet, MergeReport]:
    """Dispatch to the configured strategy.

    ``average`` reconstructs the fine-tuned models (base + tau_i) and averages
    them together with the base, matching the parameter-averaging baseline.
    """
    if cfg.strategy == "ta":
        return merge_ta(base, tvs, cfg, workers=workers)
    if cfg.strategy == "ties":
        return merge_ties(base, tvs, cfg, workers=workers)
    if cfg.strategy == "dare":
        return merge_dare(base, tvs, cfg, workers=workers)

    start = time.perf_counter()
    _check_vector_schemas(base, tvs, cfg.allow_missing)
    models = [base] + [
        apply(base, tv, 1.0, allow_missing=cfg.allow_missing, allow_fingerprint_mismatch=True)
        for tv in tvs
    ]
    merged = merge_average(models)
    alphas = [1.0 / (len(tvs) + 1)] * len(tvs)
    k = len(tvs)

    def one(name: str):
        n = base.values(name).size
        taus = [tv.values(name) for tv in tvs if name in tv]
        if not taus or n == 0:
            return TensorMergeReport(name, n, 1.0, 0, [0] * (k + 1))
        total = taus[0].copy()
        for tau in taus[1:]:
            total += tau
        elected = np.sign(total)
        conflict = np.zeros(n, dtype=bool)
        contributors = np.zeros(n, dtype=np.int16)
        for tau in taus:
            nonzero = tau != 0
            conflict |= nonzero & (np.sign(tau) != elected)
            contributors += nonzero
        return TensorMergeReport(
            name=name,
            num_elements=n,
            retained_fraction=1.0,
            sign_conflicts=int(conflict.sum()),
            contributors=np.bincount(contributors, minlength=k + 1).tolist(),
        )

    report = _report("average", cfg, alphas, tvs)
    report.tensors = _run_tensorwise(base.names(), one, workers)
    report.wall_time_s = time.perf_counter() - start
    return merged, report
