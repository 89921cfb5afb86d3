"""Shared numeric helpers for the test suite."""

from __future__ import annotations

import numpy as np

from tvmerge import ParameterSet, TaskVector


def ulp_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance in units in the last place between two float32 arrays.

    Uses the lexicographic integer mapping of IEEE-754, so the distance is
    exact for same-sign values and well defined across zero.
    """
    a = np.asarray(a, dtype=np.float32).reshape(-1)
    b = np.asarray(b, dtype=np.float32).reshape(-1)
    ai = a.view(np.int32).astype(np.int64)
    bi = b.view(np.int32).astype(np.int64)
    ai = np.where(ai < 0, -(2**31) - ai, ai)
    bi = np.where(bi < 0, -(2**31) - bi, bi)
    return np.abs(ai - bi)


def bitwise_equal(a: ParameterSet, b: ParameterSet) -> bool:
    if a.names() != b.names():
        return False
    for name in a.names():
        if a.meta(name).shape != b.meta(name).shape:
            return False
        if not np.array_equal(
            a.values(name).view(np.uint32), b.values(name).view(np.uint32)
        ):
            return False
    return True


def random_checkpoint_pair(
    rng: np.random.Generator,
    num_tensors: tuple[int, int] = (3, 10),
    elements: tuple[int, int] = (1, 10_000),
    delta_scale: float | None = None,
) -> tuple[ParameterSet, ParameterSet]:
    """A base checkpoint and a fine-tune-like perturbation of it.

    The tuned values are computed as float32(base + delta), the way a real
    fine-tune produces a checkpoint from its initialization.
    """
    t = int(rng.integers(num_tensors[0], num_tensors[1] + 1))
    base_arrays = {}
    tuned_arrays = {}
    for i in range(t):
        n = int(rng.integers(elements[0], elements[1] + 1))
        name = f"layer.{i:03d}.weight"
        base = rng.standard_normal(n, dtype=np.float32)
        scale = delta_scale if delta_scale is not None else 10.0 ** rng.uniform(-3, 0)
        delta = (scale * rng.standard_normal(n)).astype(np.float32)
        base_arrays[name] = base
        tuned_arrays[name] = base + delta
    return (
        ParameterSet.from_arrays(base_arrays),
        ParameterSet.from_arrays(tuned_arrays),
    )


def make_vector(
    base: ParameterSet, arrays: dict[str, np.ndarray], label: str
) -> TaskVector:
    """Wrap raw delta arrays as a task vector against the given base."""
    data = ParameterSet.from_arrays(
        {name: np.asarray(values, dtype=np.float32) for name, values in arrays.items()}
    )
    return TaskVector(data=data, label=label, base_fingerprint=base.schema_fingerprint())


def random_vectors(
    rng: np.random.Generator,
    base: ParameterSet,
    k: int,
    scale: float = 1.0,
) -> list[TaskVector]:
    vectors = []
    for i in range(k):
        arrays = {
            name: (scale * rng.standard_normal(meta.num_elements)).astype(np.float32)
            for name, meta, _ in base.items()
        }
        vectors.append(make_vector(base, arrays, f"vec-{i:02d}"))
    return vectors
