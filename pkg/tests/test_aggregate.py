import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avpipe.aggregate import (
    EmbeddingMap,
    LinearProjector,
    WeightMap,
    aggregate_dense,
    aggregate_recursive,
    embed,
    identity_projector,
    normalize_weights,
    recursive_vjp,
    similarity_weights,
)
from avpipe.warpcore import ContractViolation, FeatureMap
from references import scalar_dense_aggregate

E = float(np.e)


class TestEmbed:
    def test_identity_projector_keeps_data(self, rng):
        f = FeatureMap(rng.normal(size=(3, 4, 5)))
        e = embed(f, identity_projector)
        assert np.array_equal(e.data, f.data)

    def test_zero_map_through_linear_is_zero(self):
        f = FeatureMap(np.zeros((3, 3, 4)))
        proj = LinearProjector.seeded(4, 8, seed=1)
        assert np.array_equal(embed(f, proj).data, np.zeros((3, 3, 8)))

    def test_seeded_projector_matches_golden_fixture(self, tmp_path):
        # Fixture generated once with a scalar loop; see tests/fixtures.
        from pathlib import Path

        from avpipe.tensorio import read_tensor

        fixture_dir = Path(__file__).parent / "fixtures"
        feature = read_tensor(fixture_dir / "embed_input.avpt")
        golden = read_tensor(fixture_dir / "embed_golden.avpt")
        proj = LinearProjector.seeded(feature.shape[2], 8, seed=123)
        got = embed(FeatureMap(feature), proj)
        assert np.max(np.abs(got.data - golden)) <= 1e-12


class TestSimilarityWeights:
    def test_identical_vectors_give_e(self, rng):
        e = EmbeddingMap(rng.normal(size=(4, 4, 8)) + 0.1)
        w = similarity_weights(e, e)
        assert np.allclose(np.asarray(w.values), E, atol=1e-12)

    def test_orthogonal_vectors_give_one(self):
        a = np.zeros((2, 2, 4))
        b = np.zeros((2, 2, 4))
        a[..., 0] = 1.0
        b[..., 1] = 1.0
        w = similarity_weights(EmbeddingMap(a), EmbeddingMap(b))
        assert np.array_equal(np.asarray(w.values), np.ones((2, 2)))

    def test_opposite_vectors_give_inv_e(self, rng):
        data = rng.normal(size=(3, 3, 6)) + 0.2
        w = similarity_weights(EmbeddingMap(data), EmbeddingMap(-data))
        assert np.allclose(np.asarray(w.values), 1.0 / E, atol=1e-12)

    def test_range_bound_holds_with_zero_norms(self, rng):
        a = EmbeddingMap(np.zeros((2, 2, 3)))
        b = EmbeddingMap(rng.normal(size=(2, 2, 3)))
        w = np.asarray(similarity_weights(a, b).values)
        assert np.all(w >= np.exp(-1.0)) and np.all(w <= np.exp(1.0))


class TestNormalizeWeights:
    def test_single_source_is_exactly_one(self, rng):
        raw = WeightMap(rng.uniform(0.5, 2.0, size=(3, 3)))
        (w,) = normalize_weights([raw])
        assert np.array_equal(np.asarray(w.values), np.ones((3, 3)))

    def test_two_equal_sources_are_half(self, rng):
        raw = WeightMap(rng.uniform(0.5, 2.0, size=(3, 3)))
        w1, w2 = normalize_weights([raw, WeightMap(raw.values)])
        assert np.array_equal(np.asarray(w1.values), np.full((3, 3), 0.5))
        assert np.array_equal(np.asarray(w2.values), np.full((3, 3), 0.5))

    def test_e_and_one_closed_form(self):
        w1, w2 = normalize_weights(
            [WeightMap(np.full((2, 2), E)), WeightMap(np.ones((2, 2)))]
        )
        assert np.allclose(np.asarray(w1.values), E / (E + 1.0), atol=1e-12)
        assert np.allclose(np.asarray(w2.values), 1.0 / (E + 1.0), atol=1e-12)

    def test_empty_source_list_raises(self):
        with pytest.raises(ContractViolation):
            normalize_weights([])

    def test_probability_vector_randomized(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            raws = [
                WeightMap(np.exp(rng.uniform(-1.0, 1.0, size=(3, 3)))) for _ in range(n)
            ]
            ws = normalize_weights(raws)
            total = np.zeros((3, 3))
            for w in ws:
                vals = np.asarray(w.values)
                assert np.all(vals >= 0.0)
                total += vals
            assert np.max(np.abs(total - 1.0)) <= 1e-6

    def test_scale_invariance(self, rng):
        raws = [WeightMap(rng.uniform(0.1, 3.0, size=(2, 2))) for _ in range(3)]
        scaled = [WeightMap(np.asarray(r.values) * 7.5) for r in raws]
        for w1, w2 in zip(normalize_weights(raws), normalize_weights(scaled)):
            assert np.allclose(np.asarray(w1.values), np.asarray(w2.values), atol=1e-12)


class TestAggregateDense:
    def test_single_frame_window_is_identity(self, rng):
        f = FeatureMap(rng.normal(size=(3, 3, 4)))
        proj = LinearProjector.seeded(4, 8, seed=0)
        out = aggregate_dense(5, {5: f}, proj)
        assert np.array_equal(out.data, f.data)

    def test_identical_inputs_any_weights(self, rng):
        f = FeatureMap(rng.normal(size=(3, 3, 4)))
        proj = LinearProjector.seeded(4, 8, seed=0)
        out = aggregate_dense(1, {0: f, 1: f, 2: f}, proj)
        assert np.allclose(out.data, f.data, atol=1e-12)

    def test_matches_scalar_reference(self, rng):
        proj = LinearProjector.seeded(3, 8, seed=2)
        features = {k: FeatureMap(rng.normal(size=(2, 2, 3))) for k in (4, 5, 6)}
        out = aggregate_dense(5, features, proj)
        want = scalar_dense_aggregate(5, {k: v.data for k, v in features.items()}, proj)
        assert np.max(np.abs(out.data - want)) <= 1e-12

    def test_missing_reference_raises(self, rng):
        f = FeatureMap(rng.normal(size=(2, 2, 3)))
        with pytest.raises(ContractViolation):
            aggregate_dense(9, {0: f}, identity_projector)

    def test_mismatched_grids_raise(self, rng):
        a = FeatureMap(rng.normal(size=(2, 2, 3)))
        b = FeatureMap(rng.normal(size=(3, 2, 3)))
        with pytest.raises(ContractViolation):
            aggregate_dense(0, {0: a, 1: b}, identity_projector)

    def test_convex_hull_per_position(self, rng):
        proj = LinearProjector.seeded(2, 4, seed=3)
        features = {k: FeatureMap(rng.normal(size=(3, 3, 2))) for k in range(3)}
        out = aggregate_dense(1, features, proj)
        stack = np.stack([f.data for f in features.values()])
        assert np.all(out.data <= stack.max(axis=0) + 1e-12)
        assert np.all(out.data >= stack.min(axis=0) - 1e-12)


class TestAggregateRecursive:
    def test_equal_inputs_return_current(self, rng):
        f = FeatureMap(rng.normal(size=(3, 3, 4)))
        proj = LinearProjector.seeded(4, 8, seed=0)
        out = aggregate_recursive(f, FeatureMap(f.data), proj)
        assert np.array_equal(out.data, f.data)

    def test_orthogonal_prev_closed_form(self):
        # prev embeds orthogonally to current -> weights 1/(e+1) vs e/(e+1)
        prev = FeatureMap(np.tile(np.array([1.0, 0.0])[None, None, :], (2, 2, 1)))
        cur = FeatureMap(np.tile(np.array([0.0, 1.0])[None, None, :], (2, 2, 1)))
        out = aggregate_recursive(prev, cur, identity_projector)
        want = (1.0 / (E + 1.0)) * prev.data + (E / (E + 1.0)) * cur.data
        assert np.max(np.abs(out.data - want)) <= 1e-12

    def test_degenerate_full_recompute_matches_key_frame_formula(self, rng):
        # with the current feature being the real key feature, the two-term
        # blend is exactly the key-frame aggregation rule
        proj = LinearProjector.seeded(4, 8, seed=1)
        prev_warped = FeatureMap(rng.normal(size=(3, 3, 4)))
        f_real = FeatureMap(rng.normal(size=(3, 3, 4)))
        out1 = aggregate_recursive(prev_warped, f_real, proj)
        out2 = aggregate_recursive(prev_warped, FeatureMap(f_real.data), proj)
        assert np.array_equal(out1.data, out2.data)

    def test_running_chain_stays_in_global_hull(self, rng):
        proj = LinearProjector.seeded(2, 4, seed=5)
        reals = [FeatureMap(rng.normal(size=(2, 2, 2))) for _ in range(6)]
        agg = reals[0]
        lo = reals[0].data.copy()
        hi = reals[0].data.copy()
        for f in reals[1:]:
            agg = aggregate_recursive(agg, f, proj)
            lo = np.minimum(lo, f.data)
            hi = np.maximum(hi, f.data)
        assert np.all(agg.data <= hi + 1e-9)
        assert np.all(agg.data >= lo - 1e-9)


class TestRecursiveVjp:
    def test_forward_matches_op(self, rng):
        proj = LinearProjector.seeded(4, 8, seed=1)
        a = rng.normal(size=(3, 3, 4))
        b = rng.normal(size=(3, 3, 4))
        out, _ = recursive_vjp(a, b, proj)
        want = aggregate_recursive(FeatureMap(a), FeatureMap(b), proj)
        assert np.allclose(out, want.data, atol=1e-12)
