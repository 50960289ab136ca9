import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsmerge.merge import (
    MergeRecipe,
    apply_recipe,
    interpolate,
    linear_merge,
    sequential_chain,
    sequential_step,
    task_vector,
    ties_merge,
)
from wsmerge.tensor_store import Checkpoint, CheckpointError

from _helpers import random_ckpt, random_schema, ties_reference

MANIFEST = {"downsampling": [], "head": ["w"]}


def vec(values, dtype=np.float64):
    return Checkpoint({"w": np.array(values, dtype=dtype)}, {k: list(v) for k, v in MANIFEST.items()})


def same_bits(a: Checkpoint, b: Checkpoint) -> bool:
    return all(a.tensors[k].tobytes() == b.tensors[k].tobytes() and
               a.tensors[k].dtype == b.tensors[k].dtype for k in a.tensors)


class TestInterpolate:
    def test_endpoints_are_copies(self, rng):
        shapes, manifest = random_schema(rng)
        a, b = random_ckpt(rng, shapes, manifest), random_ckpt(rng, shapes, manifest)
        assert same_bits(interpolate(a, b, 0.0), a)
        assert same_bits(interpolate(a, b, 1.0), b)

    def test_quarter(self):
        out = interpolate(vec([0, 2]), vec([4, 6]), 0.25)
        np.testing.assert_array_equal(out.tensors["w"], [1, 3])

    def test_self_interpolation_exact(self, rng):
        shapes, manifest = random_schema(rng)
        a = random_ckpt(rng, shapes, manifest)
        for alpha in (0.1, 0.25, 0.7):
            assert same_bits(interpolate(a, a.copy(), alpha), a)

    def test_rejects_bad_alpha_and_schema(self):
        with pytest.raises(ValueError):
            interpolate(vec([0]), vec([1]), 1.5)
        with pytest.raises(CheckpointError):
            interpolate(vec([0]), vec([1, 2]), 0.5)

    def test_provenance_and_manifest(self):
        base = vec([0.0])
        base.meta["provenance"] = "pretrain"
        out = interpolate(base, vec([1.0]), 0.25)
        assert out.meta["provenance"] == "pretrain;interpolate(alpha=0.25)"
        assert out.manifest == base.manifest

    def test_f32_stays_f32(self):
        out = interpolate(vec([0, 1], np.float32), vec([1, 3], np.float32), 0.5)
        assert out.tensors["w"].dtype == np.float32

    def test_mixed_dtype_promotes(self):
        out = interpolate(vec([0, 1], np.float32), vec([1, 3]), 0.5)
        assert out.tensors["w"].dtype == np.float64

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0, 1), f32=st.booleans())
    def test_affine_symmetry(self, seed, alpha, f32):
        rng = np.random.default_rng(seed)
        shapes, manifest = random_schema(rng)
        dtype = np.float32 if f32 else np.float64
        a, b = random_ckpt(rng, shapes, manifest, dtype), random_ckpt(rng, shapes, manifest, dtype)
        x, y = interpolate(a, b, alpha), interpolate(a, b, 1 - alpha)
        rtol, atol = (1e-6, 1e-6) if f32 else (1e-14, 1e-14)
        for k in a.tensors:
            lhs = x.tensors[k].astype(np.float64) + y.tensors[k]
            rhs = a.tensors[k].astype(np.float64) + b.tensors[k]
            np.testing.assert_allclose(lhs, rhs, rtol=rtol, atol=atol)


class TestLinearMerge:
    def test_mean_then_blend(self):
        out = linear_merge(vec([0]), [vec([2]), vec([4])], 0.5)
        np.testing.assert_array_equal(out.tensors["w"], [1.5])

    def test_single_model_is_interpolate(self, rng):
        shapes, manifest = random_schema(rng)
        a, b = random_ckpt(rng, shapes, manifest), random_ckpt(rng, shapes, manifest)
        assert same_bits(linear_merge(a, [b], 0.3), interpolate(a, b, 0.3))

    def test_empty_models(self):
        with pytest.raises(ValueError):
            linear_merge(vec([0]), [], 0.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 5))
    def test_permutation_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        shapes, manifest = random_schema(rng)
        base = random_ckpt(rng, shapes, manifest)
        models = [random_ckpt(rng, shapes, manifest) for _ in range(k)]
        ref = linear_merge(base, models, 0.4)
        perm = [models[i] for i in rng.permutation(k)]
        assert same_bits(linear_merge(base, perm, 0.4), ref)


class TestTies:
    def test_hand_example(self):
        theta0 = vec([0, 0, 0])
        m1, m2 = vec([1, -2, 0.1]), vec([1, 3, -0.1])
        out = ties_merge(theta0, [m1, m2], alpha=1.0, trim_fraction=2 / 3)
        np.testing.assert_array_equal(out.tensors["w"], [1, 3, 0])

    def test_single_model_no_trim_is_interpolate(self, rng):
        shapes, manifest = random_schema(rng)
        a, b = random_ckpt(rng, shapes, manifest), random_ckpt(rng, shapes, manifest)
        for alpha in (0.0, 0.25, 1.0):
            assert same_bits(ties_merge(a, [b], alpha, 1.0), interpolate(a, b, alpha))

    def test_sign_tie_gives_zero(self):
        out = ties_merge(vec([5.0]), [vec([6.0]), vec([4.0])], 1.0, 1.0)
        np.testing.assert_array_equal(out.tensors["w"], [5.0])

    def test_bad_trim(self):
        with pytest.raises(ValueError):
            ties_merge(vec([0]), [vec([1])], 0.5, 0.0)
        with pytest.raises(ValueError):
            ties_merge(vec([0]), [vec([1])], 0.5, 1.2)

    def test_per_tensor_trim_differs_from_global(self):
        base = Checkpoint({"a": np.zeros(4), "b": np.zeros(4)},
                          {"downsampling": ["a"], "head": ["b"]})
        ft = Checkpoint({"a": np.array([10.0, 9, 8, 7]), "b": np.array([0.4, 0.3, 0.2, 0.1])},
                        base.manifest)
        glob = ties_merge(base, [ft], 1.0, 0.5)
        per = ties_merge(base, [ft], 1.0, 0.5, per_tensor=True)
        np.testing.assert_array_equal(glob.tensors["b"], 0.0)
        np.testing.assert_array_equal(per.tensors["b"], [0.4, 0.3, 0.0, 0.0])
        np.testing.assert_array_equal(per.tensors["a"], [10, 9, 0, 0])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4),
           trim=st.sampled_from([0.1, 0.2, 0.5, 0.9, 1.0]), per_tensor=st.booleans(),
           discrete=st.booleans())
    def test_matches_reference(self, seed, k, trim, per_tensor, discrete):
        rng = np.random.default_rng(seed)
        shapes, manifest = random_schema(rng)
        base = random_ckpt(rng, shapes, manifest, discrete=discrete)
        models = [random_ckpt(rng, shapes, manifest, discrete=discrete) for _ in range(k)]
        out = ties_merge(base, models, 0.25, trim, per_tensor)
        ref = ties_reference(base, models, 0.25, trim, per_tensor)
        for name in shapes:
            assert out.tensors[name].tobytes() == ref[name].tobytes()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4), alpha=st.floats(0, 1),
           trim=st.sampled_from([0.2, 0.5, 1.0]))
    def test_identical_task_vectors(self, seed, k, alpha, trim):
        rng = np.random.default_rng(seed)
        shapes, manifest = random_schema(rng)
        base, ft = random_ckpt(rng, shapes, manifest), random_ckpt(rng, shapes, manifest)
        out = ties_merge(base, [ft.copy() for _ in range(k)], alpha, trim)
        tau = task_vector(base, ft)
        flat = np.concatenate([np.abs(t).ravel() for t in tau.values()])
        keep = int(np.ceil(trim * flat.size - 1e-9))
        cutoff = np.sort(flat)[::-1][keep - 1]
        for name, t in tau.items():
            kept = np.where(np.abs(t) >= cutoff, t, 0.0)
            np.testing.assert_allclose(out.tensors[name], base.tensors[name] + alpha * kept,
                                       rtol=1e-12, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3))
    def test_zero_where_all_trimmed_zero(self, seed, k):
        rng = np.random.default_rng(seed)
        base = vec(rng.standard_normal(20))
        models = []
        for _ in range(k):
            w = base.tensors["w"].copy()
            w[10:] += rng.standard_normal(10)
            models.append(vec(w))
        out = ties_merge(base, models, 0.5, 1.0)
        np.testing.assert_array_equal(out.tensors["w"][:10], base.tensors["w"][:10])


class TestSequential:
    def test_single_step_is_interpolate(self, rng):
        shapes, manifest = random_schema(rng)
        a, b = random_ckpt(rng, shapes, manifest), random_ckpt(rng, shapes, manifest)
        assert same_bits(sequential_step(a, b, 0.25), interpolate(a, b, 0.25))

    def test_fixed_point(self, rng):
        shapes, manifest = random_schema(rng)
        a = random_ckpt(rng, shapes, manifest)
        out = sequential_chain(a, [a.copy(), a.copy()], 0.37)
        assert same_bits(out, a)

    def test_alpha_one_returns_last(self, rng):
        shapes, manifest = random_schema(rng)
        a, b, c = (random_ckpt(rng, shapes, manifest) for _ in range(3))
        assert same_bits(sequential_chain(a, [b, c], 1.0), c)

    def test_provenance_records_chain(self):
        out = sequential_chain(vec([0.0]), [vec([1.0]), vec([2.0])], 0.5)
        assert out.meta["provenance"].count("sequential") == 2


def test_schema_preserved_for_every_method(rng):
    shapes, manifest = random_schema(rng, max_tensors=5)
    base = random_ckpt(rng, shapes, manifest)
    models = [random_ckpt(rng, shapes, manifest) for _ in range(3)]
    outs = [interpolate(base, models[0]), linear_merge(base, models),
            ties_merge(base, models), sequential_chain(base, models)]
    for out in outs:
        assert {k: (v.shape, v.dtype) for k, v in out.tensors.items()} == \
               {k: (v.shape, v.dtype) for k, v in base.tensors.items()}
        assert out.manifest == base.manifest


class TestRecipe:
    def test_roundtrip_and_apply(self, tmp_path):
        d = {"method": "ties", "inputs": ["pre.ckpt", "a.ckpt", "b.ckpt"], "alpha": 1.0,
             "trim_fraction": 2 / 3}
        (tmp_path / "r.json").write_text(json.dumps(d))
        recipe = MergeRecipe.load(tmp_path / "r.json")
        assert recipe.to_dict()["trim_fraction"] == 2 / 3
        out = apply_recipe(recipe, [vec([0, 0, 0]), vec([1, -2, 0.1]), vec([1, 3, -0.1])])
        np.testing.assert_array_equal(out.tensors["w"], [1, 3, 0])

    @pytest.mark.parametrize("d", [
        {"method": "interpolate", "inputs": ["a", "b", "c"]},
        {"method": "linear", "inputs": ["a"]},
        {"method": "ties", "inputs": ["a", "b"], "trim_fraction": 0},
        {"method": "linear", "inputs": ["a", "b"], "alpha": -0.1},
        {"method": "fisher", "inputs": ["a", "b"]},
    ])
    def test_invalid(self, d):
        with pytest.raises(ValueError):
            MergeRecipe.from_dict(d)

    def test_defaults(self):
        r = MergeRecipe.from_dict({"method": "ties", "inputs": ["a", "b"]})
        assert r.alpha == 0.25 and r.trim_fraction == 0.2
