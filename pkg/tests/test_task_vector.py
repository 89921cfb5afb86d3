"""Extraction, application, diagnostics and provenance of task vectors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvmerge import (
    FormatError,
    ParameterSet,
    ProvenanceError,
    SchemaMismatchError,
    UndefinedMetricError,
    apply,
    cosine,
    extract,
    load_vector,
    save_vector,
    stats,
)

from helpers import bitwise_equal, make_vector, random_checkpoint_pair, ulp_diff


def ps(**arrays):
    return ParameterSet.from_arrays(
        {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
    )


class TestExtract:
    def test_elementwise_subtraction(self):
        tv = extract(ps(w=[1, 2]), ps(w=[3, 1]), "demo")
        assert np.array_equal(tv.values("w"), [2, -1])
        assert tv.label == "demo"

    def test_identical_models_give_zero_vector(self):
        base = ps(w=[0.5, -1.25, 3.0])
        tv = extract(base, base, "zero")
        assert np.array_equal(tv.values("w"), [0, 0, 0])

    def test_extra_base_tensor_is_an_error_naming_it(self):
        base = ps(w=[1.0], b=[2.0])
        tuned = ps(w=[1.5])
        with pytest.raises(SchemaMismatchError, match="b"):
            extract(base, tuned, "x")

    def test_shape_mismatch_is_always_an_error(self):
        with pytest.raises(SchemaMismatchError, match="w"):
            extract(ps(w=[1, 2]), ps(w=[1, 2, 3]), "x", allow_missing=True)

    def test_allow_missing_gives_zero_delta(self):
        base = ps(w=[1.0, 2.0], b=[3.0])
        tuned = ps(w=[2.0, 2.0])
        tv = extract(base, tuned, "partial", allow_missing=True)
        assert np.array_equal(tv.values("w"), [1.0, 0.0])
        assert np.array_equal(tv.values("b"), [0.0])
        assert tv.names() == base.names()

    def test_fingerprint_matches_base_schema(self):
        base = ps(w=[1.0])
        tv = extract(base, ps(w=[2.0]), "x")
        assert tv.base_fingerprint == base.schema_fingerprint()


class TestApply:
    def test_scale_one_reproduces_tuned_bitwise(self):
        rng = np.random.default_rng(0)
        base, tuned = random_checkpoint_pair(rng, num_tensors=(3, 5), elements=(1, 200))
        tv = extract(base, tuned, "ft")
        assert bitwise_equal(apply(base, tv, 1.0), tuned)

    def test_scale_zero_returns_base_exactly(self):
        base = ps(w=[1.0, -2.0])
        tv = extract(base, ps(w=[5.0, 5.0]), "x")
        assert bitwise_equal(apply(base, tv, 0.0), base)

    def test_half_scale_linearity(self):
        base = ps(w=[0.0, 0.0])
        tv = make_vector(base, {"w": [1.0, 2.0]}, "x")
        assert np.array_equal(apply(base, tv, 0.5).values("w"), [0.5, 1.0])

    def test_base_not_mutated(self):
        base = ps(w=[1.0])
        before = base.values("w").copy()
        tv = make_vector(base, {"w": [9.0]}, "x")
        apply(base, tv, 1.0)
        assert np.array_equal(base.values("w"), before)

    def test_fingerprint_mismatch_raises(self):
        from tvmerge import TaskVector

        base = ps(w=[1.0])
        good = extract(base, ps(w=[2.0]), "x")
        rewired = TaskVector(good.data, good.label, "not-the-real-fingerprint")
        with pytest.raises(ProvenanceError):
            apply(base, rewired, 1.0)
        # a base with the same names/shapes but different storage dtype is a
        # different provenance too, even though schema_compare ignores dtype
        f16_base = ParameterSet.from_arrays(
            {"w": np.array([1.0], dtype=np.float32)}, dtypes={"w": "float16"}
        )
        with pytest.raises(ProvenanceError):
            apply(f16_base, good, 1.0)

    def test_fingerprint_override(self):
        base_a = ps(w=[1.0])
        base_b = ps(w=[10.0])
        tv = extract(base_a, ps(w=[2.0]), "x")
        out = apply(base_b, tv, 1.0, allow_fingerprint_mismatch=True)
        assert np.array_equal(out.values("w"), [11.0])

    def test_allow_missing_passthrough(self):
        base = ps(w=[1.0], b=[5.0])
        tv_data = ParameterSet.from_arrays({"w": np.array([2.0], dtype=np.float32)})
        from tvmerge import TaskVector

        tv = TaskVector(tv_data, "partial", base.schema_fingerprint())
        out = apply(base, tv, 1.0, allow_missing=True)
        assert np.array_equal(out.values("w"), [3.0])
        assert np.array_equal(out.values("b"), [5.0])
        with pytest.raises(SchemaMismatchError):
            apply(base, tv, 1.0)


class TestRoundTripProperties:
    @settings(max_examples=60, deadline=None)
    @given(
        data=st.lists(
            st.tuples(
                st.floats(min_value=-1e3, max_value=1e3, width=32),
                st.floats(min_value=-10, max_value=10, width=32),
            ),
            min_size=1,
            max_size=64,
        )
    )
    def test_extract_apply_inverse_bitwise(self, data):
        # tuned is float32(base + delta), the way fine-tuning produces it
        base_values = np.array([b for b, _ in data], dtype=np.float32) + 0.0
        delta = np.array([d for _, d in data], dtype=np.float32)
        tuned_values = (base_values + delta) + 0.0  # canonicalize -0.0
        base = ps(w=base_values)
        tuned = ps(w=tuned_values)
        assert bitwise_equal(apply(base, extract(base, tuned, "t"), 1.0), tuned)

    def test_linearity_one_ulp_per_accumulation_step(self):
        # the stepped path accumulates twice; each step may cost one ulp of the
        # operand magnitude (relative ulps of the result are meaningless when
        # base + scale*tau cancels toward zero)
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = 64
            base_values = rng.standard_normal(n, dtype=np.float32)
            base = ps(w=base_values)
            tau = (0.1 * rng.standard_normal(n)).astype(np.float32)
            tv = make_vector(base, {"w": tau}, "x")
            a, b = rng.uniform(0.1, 1.0, size=2)
            direct = apply(base, tv, a + b).values("w")
            stepped = apply(apply(base, tv, a), tv, b).values("w")
            diff = np.abs(direct.astype(np.float64) - stepped.astype(np.float64))
            magnitude = np.maximum.reduce(
                [np.abs(base_values), np.abs(np.float32(a + b) * tau), np.abs(direct)]
            )
            assert np.all(diff <= 2 * np.spacing(magnitude).astype(np.float64))


class TestStats:
    def test_zero_vector(self):
        base = ps(w=[0.0, 0.0])
        tv = make_vector(base, {"w": [0.0, 0.0]}, "z")
        s = stats(tv)
        assert s.global_stats.l2_norm == 0.0
        assert s.global_stats.zero_fraction == 1.0

    def test_three_four_five(self):
        base = ps(w=[0.0, 0.0])
        tv = make_vector(base, {"w": [3.0, 4.0]}, "x")
        assert stats(tv).per_tensor["w"].l2_norm == 5.0

    def test_zero_fraction_half(self):
        base = ps(w=[0.0] * 4)
        tv = make_vector(base, {"w": [1.0, -1.0, 0.0, 0.0]}, "x")
        assert stats(tv).per_tensor["w"].zero_fraction == 0.5

    def test_histogram_counts_sum_to_size(self):
        rng = np.random.default_rng(5)
        base = ps(w=np.zeros(100, dtype=np.float32))
        tv = make_vector(base, {"w": rng.standard_normal(100).astype(np.float32)}, "x")
        s = stats(tv)
        assert sum(s.per_tensor["w"].histogram_counts) == 100
        assert sum(s.global_stats.histogram_counts) == 100


class TestCosine:
    def test_self_similarity(self):
        base = ps(w=[0.0, 0.0])
        tv = make_vector(base, {"w": [1.0, 2.0]}, "x")
        assert cosine(tv, tv) == 1.0

    def test_orthogonal(self):
        base = ps(w=[0.0, 0.0])
        a = make_vector(base, {"w": [1.0, 0.0]}, "a")
        b = make_vector(base, {"w": [0.0, 1.0]}, "b")
        assert cosine(a, b) == 0.0

    def test_antiparallel(self):
        base = ps(w=[0.0])
        a = make_vector(base, {"w": [1.0]}, "a")
        b = make_vector(base, {"w": [-2.0]}, "b")
        assert cosine(a, b) == -1.0

    def test_zero_norm_is_undefined(self):
        base = ps(w=[0.0])
        a = make_vector(base, {"w": [0.0]}, "a")
        b = make_vector(base, {"w": [1.0]}, "b")
        with pytest.raises(UndefinedMetricError):
            cosine(a, b)

    def test_schema_mismatch(self):
        a = make_vector(ps(w=[0.0]), {"w": [1.0]}, "a")
        b = make_vector(ps(v=[0.0]), {"v": [1.0]}, "b")
        with pytest.raises(SchemaMismatchError):
            cosine(a, b)


class TestVectorFiles:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        base, tuned = random_checkpoint_pair(rng, num_tensors=(3, 4), elements=(1, 50))
        tv = extract(base, tuned, "rare-word")
        path = str(tmp_path / "vec.safetensors")
        save_vector(tv, path)
        loaded = load_vector(path)
        assert loaded.label == "rare-word"
        assert loaded.base_fingerprint == tv.base_fingerprint
        assert loaded.data.metadata["creator_version"].startswith("tvmerge")
        assert bitwise_equal(loaded.data, tv.data)
        # applying the reloaded vector still reproduces the tuned model
        assert bitwise_equal(apply(base, loaded, 1.0), tuned)

    def test_plain_checkpoint_is_not_a_vector(self, tmp_path):
        from tvmerge import save_checkpoint

        path = str(tmp_path / "plain.safetensors")
        save_checkpoint(ps(w=[1.0]), path)
        with pytest.raises(FormatError, match="task-vector"):
            load_vector(path)
