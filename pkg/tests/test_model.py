import numpy as np
import pytest

from popmap import (
    BuildingGrid,
    CovariateStack,
    FeatureStats,
    ModelParams,
    RegionMap,
    built_mask,
    compute_feature_stats,
    forward_occupancy,
    init_params,
    load_checkpoint,
    load_grid,
    normalize_features,
    predict_population,
    predict_to_file,
    save_checkpoint,
    save_dataset,
)
from popmap.errors import (
    CovariateMismatchError,
    DimensionMismatchError,
    GridFormatError,
    NumericError,
    TruncatedFileError,
    ValidationError,
)
from popmap.io import load_manifest
from popmap.model import (
    PixelBatch,
    backward,
    make_pixel_batch,
    param_leaves,
    sigmoid,
    softplus,
)


def small_params(seed=0, d=2, hidden=3, dropout=0.0, output_mode="occupancy"):
    names = [f"c{i}" for i in range(d)]
    return init_params(names, seed, hidden=hidden, dropout=dropout,
                       output_mode=output_mode)


def zero_params(d=2, hidden=3, dropout=0.0):
    p = small_params(d=d, hidden=hidden, dropout=dropout)
    for leaf in param_leaves(p):
        leaf[...] = 0.0
    return p


class TestActivations:
    def test_softplus_oracle_values(self):
        assert softplus(np.array([0.0]))[0] == pytest.approx(np.log(2.0), abs=0)
        # large x: softplus(x) = x + log1p(e^-x); at 20 the correction is ~2e-9
        assert softplus(np.array([20.0]))[0] == pytest.approx(
            20.0 + np.log1p(np.exp(-20.0)), rel=1e-15
        )
        big = softplus(np.array([1000.0]))[0]
        assert big == 1000.0  # naive log(1+e^1000) would overflow

    def test_softplus_positive_and_finite(self):
        x = np.linspace(-700, 700, 401)
        y = softplus(x)
        assert np.isfinite(y).all()
        assert (y > 0).all()
        assert (np.diff(y) > 0).all()  # strictly increasing
        # extreme negatives underflow gracefully to 0, never below
        assert softplus(np.array([-800.0]))[0] == 0.0

    def test_sigmoid_matches_softplus_derivative(self):
        x = np.linspace(-5, 5, 41)
        eps = 1e-6
        fd = (softplus(x + eps) - softplus(x - eps)) / (2 * eps)
        assert np.allclose(sigmoid(x), fd, atol=1e-9)

    def test_sigmoid_saturates_without_overflow(self):
        y = sigmoid(np.array([-1e4, 0.0, 1e4]))
        assert np.isfinite(y).all()
        assert y[0] == 0.0 and y[1] == 0.5 and y[2] == 1.0


class TestInit:
    def test_deterministic_and_he_bounded(self):
        a = init_params(["x", "y"], seed=7, hidden=16)
        b = init_params(["x", "y"], seed=7, hidden=16)
        for la, lb in zip(param_leaves(a), param_leaves(b)):
            assert np.array_equal(la, lb)
        c = init_params(["x", "y"], seed=8, hidden=16)
        assert not np.array_equal(a.weights[0], c.weights[0])
        for w in a.weights:
            limit = np.sqrt(6.0 / w.shape[0])
            assert np.abs(w).max() < limit
        for bias in a.biases:
            assert np.array_equal(bias, np.zeros_like(bias))

    def test_dims_chain(self):
        p = init_params(["a", "b", "c"], seed=0, hidden=5)
        assert p.dims() == [(3, 5), (5, 5), (5, 5), (5, 1)]
        assert p.n_features == 3

    def test_validation(self):
        with pytest.raises(ValidationError):
            init_params([], seed=0)
        with pytest.raises(ValidationError):
            init_params(["a"], seed=0, hidden=0)
        p = small_params()
        with pytest.raises(ValidationError):
            ModelParams(p.weights[:3], p.biases[:3], p.stats, p.covariates)
        with pytest.raises(ValidationError):
            ModelParams(p.weights, p.biases, p.stats, ["only-one-name"])
        with pytest.raises(ValidationError):
            ModelParams(p.weights, p.biases, p.stats, p.covariates, dropout=1.0)
        with pytest.raises(ValidationError):
            ModelParams(p.weights, p.biases, p.stats, p.covariates,
                        output_mode="both")
        broken = [w.copy() for w in p.weights]
        broken[1] = np.zeros((7, 3))  # breaks the 3 -> 3 chain
        with pytest.raises(ValidationError):
            ModelParams(broken, p.biases, p.stats, p.covariates)

    def test_copy_is_deep(self):
        p = small_params()
        q = p.copy()
        q.weights[0][0, 0] += 1.0
        assert p.weights[0][0, 0] != q.weights[0][0, 0]


class TestFeatureStats:
    def test_hand_case_with_nan(self):
        raw = np.array([[1.0, 2.0], [3.0, 2.0], [np.nan, 2.0]])
        st = compute_feature_stats(raw)
        assert st.mean[0] == pytest.approx(2.0)
        assert st.std[0] == pytest.approx(1.0)  # population std of {1, 3}
        # constant column: std clamps to 1 so it normalizes to exactly 0
        assert st.mean[1] == 2.0 and st.std[1] == 1.0
        z = normalize_features(raw, st)
        assert z[:, 1].tolist() == [0.0, 0.0, 0.0]
        assert z[0, 0] == -1.0 and z[1, 0] == 1.0
        assert z[2, 0] == 0.0  # NaN imputed at the mean

    def test_all_nan_column(self):
        st = compute_feature_stats(np.full((4, 1), np.nan))
        assert st.mean[0] == 0.0 and st.std[0] == 1.0

    def test_none_role_passes_through(self):
        raw = np.array([[10.0, 10.0], [30.0, 30.0]])
        st = compute_feature_stats(raw, roles=["zscore", "none"])
        z = normalize_features(raw, st)
        assert z[:, 0].tolist() == [-1.0, 1.0]
        assert z[:, 1].tolist() == [10.0, 30.0]

    def test_role_count_must_match(self):
        with pytest.raises(ValidationError):
            compute_feature_stats(np.zeros((2, 2)), roles=["zscore"])

    def test_stats_validation(self):
        with pytest.raises(ValidationError):
            FeatureStats(np.zeros(2), np.array([1.0, 0.0]))
        with pytest.raises(ValidationError):
            FeatureStats(np.zeros(2), np.ones(3))
        with pytest.raises(ValidationError):
            FeatureStats(np.array([np.inf, 0.0]), np.ones(2))

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValidationError):
            compute_feature_stats(np.zeros((0, 3)))


class TestForward:
    def test_zero_params_give_log2(self):
        p = zero_params()
        feats = np.random.default_rng(0).normal(size=(9, 2))
        occ = forward_occupancy(p, feats)
        assert np.allclose(occ, np.log(2.0), atol=0)

    def test_infer_equals_train_without_dropout(self):
        p = small_params(dropout=0.0)
        feats = np.random.default_rng(1).normal(size=(12, 2))
        a = forward_occupancy(p, feats, mode="infer")
        b = forward_occupancy(p, feats, mode="train", rng_seed=3)
        assert np.array_equal(a, b)

    def test_train_mode_is_seeded(self):
        p = small_params(hidden=8, dropout=0.4)
        feats = np.abs(np.random.default_rng(2).normal(size=(20, 2))) + 0.5
        a = forward_occupancy(p, feats, mode="train", rng_seed=5)
        b = forward_occupancy(p, feats, mode="train", rng_seed=5)
        c = forward_occupancy(p, feats, mode="train", rng_seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_dropout_mask_statistics(self):
        # inverted dropout: entries are 0 or 1/keep, mean 1, P(keep) = keep
        p = small_params(hidden=64, dropout=0.4)
        feats = np.random.default_rng(3).normal(size=(500, 2))
        _, cache = forward_occupancy(p, feats, mode="train", rng_seed=11,
                                     return_cache=True)
        keep = 0.6
        for m in cache["masks"][:3]:
            assert m is not None
            vals = np.unique(m)
            assert set(np.round(vals, 12)) <= {0.0, round(1 / keep, 12)}
            n = m.size
            frac = np.count_nonzero(m) / n
            se = np.sqrt(keep * (1 - keep) / n)
            assert abs(frac - keep) < 3 * se
            assert abs(m.mean() - 1.0) < 3 * se / keep
        assert cache["masks"][3] is None  # no dropout after the output layer

    def test_row_permutation_equivariance(self):
        p = small_params(hidden=6)
        feats = np.random.default_rng(4).normal(size=(15, 2))
        perm = np.random.default_rng(5).permutation(15)
        assert np.allclose(
            forward_occupancy(p, feats)[perm],
            forward_occupancy(p, feats[perm]),
        )

    def test_rejects_bad_mode_and_shapes(self):
        p = small_params()
        feats = np.zeros((3, 2))
        with pytest.raises(ValidationError):
            forward_occupancy(p, feats, mode="test")
        with pytest.raises(DimensionMismatchError):
            forward_occupancy(p, np.zeros((3, 5)))

    def test_nonfinite_params_rejected(self):
        p = small_params()
        p.weights[2][0, 0] = np.nan
        with pytest.raises(NumericError):
            forward_occupancy(p, np.zeros((2, 2)))


class TestBackward:
    def gradcheck(self, params, feats, v, mode="infer", rng_seed=0, eps=1e-6):
        occ, cache = forward_occupancy(params, feats, mode=mode,
                                       rng_seed=rng_seed, return_cache=True)
        grads = backward(params, cache, v)

        def value():
            return float(v @ forward_occupancy(params, feats, mode=mode,
                                               rng_seed=rng_seed))

        worst = 0.0
        for leaf, g in zip(param_leaves(params), grads):
            assert g.shape == leaf.shape
            flat = leaf.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = value()
                flat[i] = orig - eps
                dn = value()
                flat[i] = orig
                fd = (up - dn) / (2 * eps)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, rel)
        return worst

    def relu_margin(self, params, feats, mode="infer", rng_seed=0):
        _, cache = forward_occupancy(params, feats, mode=mode,
                                     rng_seed=rng_seed, return_cache=True)
        return min(np.abs(z).min() for z in cache["pre"][:3])

    def test_finite_difference_gradcheck(self):
        rng = np.random.default_rng(17)
        for attempt in range(20):
            p = small_params(seed=attempt, d=2, hidden=3)
            feats = rng.normal(size=(5, 2))
            if self.relu_margin(p, feats) > 1e-3:
                break
        else:
            pytest.fail("no kink-safe configuration found")
        v = rng.normal(size=5)
        assert self.gradcheck(p, feats, v) < 1e-6

    def test_gradcheck_through_dropout_masks(self):
        # masks depend only on rng_seed and shapes, so central differences
        # with the same seed probe the exact masked network that backward saw
        rng = np.random.default_rng(8)
        for attempt in range(30):
            p = small_params(seed=100 + attempt, d=2, hidden=4, dropout=0.5)
            for b in p.biases:
                # nonzero biases so a fully masked layer cannot park the
                # next pre-activation exactly on the ReLU kink
                b[...] = rng.normal(size=b.shape) * 0.3
            feats = rng.normal(size=(4, 2)) + 1.0
            if self.relu_margin(p, feats, mode="train", rng_seed=42) > 1e-3:
                break
        else:
            pytest.fail("no kink-safe configuration found")
        v = rng.normal(size=4)
        assert self.gradcheck(p, feats, v, mode="train", rng_seed=42) < 1e-6

    def test_zero_upstream_gives_zero_grads(self):
        p = small_params()
        feats = np.random.default_rng(9).normal(size=(6, 2))
        _, cache = forward_occupancy(p, feats, return_cache=True)
        grads = backward(p, cache, np.zeros(6))
        for g in grads:
            assert np.array_equal(g, np.zeros_like(g))

    def test_bias_grad_is_column_sum_of_output_delta(self):
        p = zero_params()
        feats = np.random.default_rng(10).normal(size=(7, 2))
        occ, cache = forward_occupancy(p, feats, return_cache=True)
        v = np.arange(1.0, 8.0)
        grads = backward(p, cache, v)
        # all-zero params: z_out = 0, sigmoid(0) = 0.5, so db_out = 0.5 sum(v)
        assert grads[-1][0] == pytest.approx(0.5 * v.sum(), rel=1e-15)


class TestPixelBatch:
    def test_validation(self):
        feats = np.zeros((2, 3))
        cells = np.array([0, 1])
        rids = np.array([0, 0])
        with pytest.raises(ValidationError):
            PixelBatch(feats, cells, rids, np.array([1.0, 0.0]))
        with pytest.raises(ValidationError):
            PixelBatch(feats, cells, np.array([0]), np.array([1.0, 1.0]))
        with pytest.raises(ValidationError):
            PixelBatch(np.zeros((3, 2)), cells, rids, np.array([1.0, 1.0]))

    def test_take_reorders(self):
        b = PixelBatch(np.arange(6.0).reshape(3, 2), np.array([4, 7, 9]),
                       np.array([1, 2, 3]), np.array([1.0, 2.0, 3.0]))
        t = b.take(np.array([2, 0]))
        assert t.cell_index.tolist() == [9, 4]
        assert t.buildings.tolist() == [3.0, 1.0]
        assert len(t) == 2

    def test_make_pixel_batch_gathers_built_cells(self):
        stack = CovariateStack(2, 2, ["a"], np.array([[1.0, 2.0, 3.0, 4.0]],
                                                     dtype=np.float32))
        b = BuildingGrid(2, 2, np.array([0, 2, 0, 5], dtype=np.float32))
        r = RegionMap(2, 2, np.array([0, 0, 1, 1], dtype=np.int32))
        st = FeatureStats(np.array([2.0]), np.array([2.0]))
        batch = make_pixel_batch(stack, b, r, st)
        assert batch.cell_index.tolist() == [1, 3]
        assert batch.region_id.tolist() == [0, 1]
        assert batch.buildings.tolist() == [2.0, 5.0]
        assert batch.features[:, 0].tolist() == [0.0, 1.0]


class TestPredict:
    def setup_small(self):
        rng = np.random.default_rng(21)
        w, h = 6, 5
        layers = rng.normal(size=(2, w * h)).astype(np.float32)
        stack = CovariateStack(w, h, ["u", "v"], layers)
        counts = np.zeros(w * h, dtype=np.float32)
        counts[[3, 7, 11, 20]] = [2, 1, 4, 3]
        buildings = BuildingGrid(w, h, counts)
        params = small_params(seed=2, d=2, hidden=4)
        params.covariates = ["u", "v"]
        return stack, buildings, params

    def test_zero_outside_built_cells(self):
        stack, buildings, params = self.setup_small()
        pop = predict_population(params, stack, buildings)
        built = built_mask(buildings)
        mask = np.zeros(len(pop.values), dtype=bool)
        mask[built] = True
        assert (pop.values[~mask] == 0.0).all()
        assert (pop.values[mask] > 0.0).all()

    def test_occupancy_mode_multiplies_buildings(self):
        stack, buildings, params = self.setup_small()
        direct = params.copy()
        direct.output_mode = "direct"
        pop_occ = predict_population(params, stack, buildings)
        pop_dir = predict_population(direct, stack, buildings)
        built = built_mask(buildings)
        assert np.allclose(
            pop_occ.values[built],
            pop_dir.values[built] * buildings.counts[built],
            rtol=1e-12,
        )

    def test_region_mask_forces_outside_to_zero(self):
        stack, buildings, params = self.setup_small()
        ids = np.full(30, -1, dtype=np.int32)
        ids[:10] = 0  # only cells 3 and 7 are inside a region
        regions = RegionMap(6, 5, ids)
        pop = predict_population(params, stack, buildings, regions=regions)
        assert pop.values[11] == 0.0 and pop.values[20] == 0.0
        assert pop.values[3] > 0.0 and pop.values[7] > 0.0

    def test_chunking_does_not_change_values(self):
        stack, buildings, params = self.setup_small()
        a = predict_population(params, stack, buildings)
        b = predict_population(params, stack, buildings, chunk=1)
        assert np.allclose(a.values, b.values, rtol=1e-12, atol=0)

    def test_covariate_mismatch(self):
        stack, buildings, params = self.setup_small()
        params.covariates = ["v", "u"]
        with pytest.raises(CovariateMismatchError):
            predict_population(params, stack, buildings)

    def test_shape_mismatch(self):
        stack, buildings, params = self.setup_small()
        small = BuildingGrid(2, 2, np.ones(4, dtype=np.float32))
        with pytest.raises(DimensionMismatchError):
            predict_population(params, stack, small)


class TestPredictToFile:
    def test_matches_dense_prediction(self, tmp_path, tiny_world):
        ds, _ = tiny_world
        manifest_path = save_dataset(tmp_path / "ds", ds)
        manifest = load_manifest(manifest_path)
        raw = ds.stack.values[:, built_mask(ds.buildings)].T
        stats = compute_feature_stats(raw)
        params = init_params(ds.stack.names, seed=6, hidden=8, stats=stats)
        out = tmp_path / "pred.pgrd"
        n = predict_to_file(params, manifest, tmp_path / "ds", out,
                            window_rows=5)
        dense = predict_population(params, ds.stack, ds.buildings)
        got, w, h = load_grid(out)
        assert (w, h) == (ds.width, ds.height)
        assert n == len(built_mask(ds.buildings))
        assert np.array_equal(got > 0, dense.values > 0)  # same support
        assert np.allclose(got, dense.values.astype(np.float32), rtol=1e-6)

    def test_covariate_mismatch(self, tmp_path, tiny_world):
        ds, _ = tiny_world
        manifest_path = save_dataset(tmp_path / "ds", ds)
        manifest = load_manifest(manifest_path)
        params = init_params(["wrong"], seed=0, hidden=4)
        with pytest.raises(CovariateMismatchError):
            predict_to_file(params, manifest, tmp_path / "ds",
                            tmp_path / "p.pgrd")


class TestCheckpoint:
    def params(self):
        p = small_params(seed=9, d=3, hidden=4, dropout=0.25)
        p.covariates = ["a", "b", "c"]
        p.stats = FeatureStats(np.array([0.5, -1.0, 2.0]),
                               np.array([1.5, 2.0, 0.25]))
        return p

    def test_round_trip(self, tmp_path):
        p = self.params()
        path = tmp_path / "m.pckp"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        for a, b in zip(param_leaves(p), param_leaves(q)):
            assert np.array_equal(a, b)
        assert np.array_equal(p.stats.mean, q.stats.mean)
        assert np.array_equal(p.stats.std, q.stats.std)
        assert q.covariates == p.covariates
        assert q.dropout == p.dropout
        assert q.output_mode == p.output_mode

    def test_resave_is_byte_identical(self, tmp_path):
        p = self.params()
        a, b = tmp_path / "a.pckp", tmp_path / "b.pckp"
        save_checkpoint(p, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_and_bad_magic(self, tmp_path):
        from popmap.errors import MissingFileError

        with pytest.raises(MissingFileError):
            load_checkpoint(tmp_path / "nope.pckp")
        path = tmp_path / "m.pckp"
        save_checkpoint(self.params(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"PGRD"
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncations_report_offsets(self, tmp_path):
        path = tmp_path / "m.pckp"
        save_checkpoint(self.params(), path)
        blob = path.read_bytes()

        path.write_bytes(blob[:10])
        with pytest.raises(TruncatedFileError) as exc:
            load_checkpoint(path)
        assert exc.value.byte_offset == 10

        path.write_bytes(blob[:20])  # inside the JSON metadata
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

        path.write_bytes(blob[:-3])  # inside the float payload
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_payload_count_mismatch(self, tmp_path):
        import struct as _struct

        path = tmp_path / "m.pckp"
        save_checkpoint(self.params(), path)
        blob = bytearray(path.read_bytes())
        magic, ver, a, b, meta_len, n_values = _struct.unpack_from(
            "<4sHBBII", blob, 0)
        _struct.pack_into("<4sHBBII", blob, 0, magic, ver, a, b,
                          meta_len, n_values - 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="payload"):
            load_checkpoint(path)

    def test_corrupt_metadata(self, tmp_path):
        import struct as _struct

        path = tmp_path / "m.pckp"
        save_checkpoint(self.params(), path)
        blob = bytearray(path.read_bytes())
        blob[16] = ord("X")  # JSON starts right after the header
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="metadata"):
            load_checkpoint(path)
