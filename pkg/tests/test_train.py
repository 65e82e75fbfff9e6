import warnings

import numpy as np
import pytest

from popmap import (
    BuildingGrid,
    CensusTable,
    CovariateStack,
    RegionMap,
    TrainConfig,
    build_training_view,
    fit,
)
from popmap.errors import NumericError, ValidationError
from popmap.io import Dataset
from popmap.model import (
    PixelBatch,
    forward_occupancy,
    init_params,
    param_leaves,
)
from popmap.train import (
    MERGED_ID,
    TRAIN_LOG_COLUMNS,
    RegionRecord,
    _AdamState,
    _adam_step,
    log_l1_loss,
    merge_pseudo_region,
    region_loss_and_grad,
    split_records,
)


def hand_dataset(drop_region_one_buildings=False):
    """4x3 world, 2 fine regions nested in 1 coarse region."""
    w, h = 4, 3
    rng = np.random.default_rng(12)
    layers = rng.normal(size=(2, w * h)).astype(np.float32)
    stack = CovariateStack(w, h, ["a", "b"], layers)
    counts = np.zeros(w * h, dtype=np.float32)
    counts[[0, 1, 5, 8, 10, 11]] = [2, 1, 3, 4, 1, 2]
    if drop_region_one_buildings:
        counts[[8, 10, 11]] = 0.0  # fine region 1 loses all built cells
    buildings = BuildingGrid(w, h, counts)
    fine_ids = np.where(np.arange(w * h) < 8, 0, 1).astype(np.int32)
    regions_fine = RegionMap(w, h, fine_ids)
    regions_coarse = RegionMap(w, h, np.zeros(w * h, dtype=np.int32))
    census_fine = CensusTable(np.array([0, 1]), np.array([0, 0]),
                              np.array([30.0, 20.0]))
    census_coarse = CensusTable(np.array([0]), np.array([-1]),
                                np.array([50.0]))
    return Dataset("hand", stack, buildings, regions_fine, regions_coarse,
                   census_fine, census_coarse)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.use_log_loss and cfg.use_occupancy and cfg.use_augmentation

    @pytest.mark.parametrize("kw", [
        {"learning_rate": 0.0},
        {"weight_decay_grid": ()},
        {"weight_decay_grid": (-1e-4,)},
        {"max_epochs": 0},
        {"patience": 0},
        {"regions_per_step": 0},
        {"augment_prob": 1.5},
        {"eps_log": 0.0},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)


class TestLogL1:
    def test_hand_values(self):
        e2 = float(np.exp(2.0))
        got = log_l1_loss(np.array([e2, 1.0]), np.array([1.0, e2]))
        assert np.allclose(got, [2.0, 2.0], rtol=1e-14)

    def test_clamp_at_eps(self):
        # c_hat = 0 clamps to eps: |log eps - log 1| = -log eps
        got = log_l1_loss(np.array([0.0]), np.array([1.0]), eps=1e-8)
        assert got[0] == pytest.approx(-np.log(1e-8), rel=1e-15)
        # both below eps: distance collapses to 0
        assert log_l1_loss(np.array([0.0]), np.array([1e-12]))[0] == 0.0

    def test_symmetric_and_scale_free(self):
        c_hat = np.array([3.0, 7.0])
        c = np.array([5.0, 2.0])
        assert np.allclose(log_l1_loss(c_hat, c), log_l1_loss(c, c_hat))
        assert np.allclose(log_l1_loss(10 * c_hat, 10 * c),
                           log_l1_loss(c_hat, c), rtol=1e-12)


class TestMergeAndSplit:
    def recs(self, n, split="train"):
        return [RegionRecord(i, 10.0 * (i + 1), np.array([i]), split=split)
                for i in range(n)]

    def test_merge_hand_case(self):
        a = RegionRecord(3, 120.0, np.array([0, 1]), split="train")
        b = RegionRecord(5, 80.0, np.array([4]), split="train")
        m = merge_pseudo_region(a, b)
        assert m.region_id == MERGED_ID
        assert m.count == 200.0
        assert m.rows.tolist() == [0, 1, 4]
        assert m.split == "train"

    def test_merge_rejects_self_and_non_train(self):
        a, b = self.recs(2)
        with pytest.raises(ValidationError):
            merge_pseudo_region(a, a)
        b.split = "val"
        with pytest.raises(ValidationError):
            merge_pseudo_region(a, b)

    def test_split_counts(self):
        recs = self.recs(10, split=None)
        split_records(recs, 0.2, np.random.default_rng(0))
        tags = [r.split for r in recs]
        assert tags.count("val") == 2 and tags.count("train") == 8

    def test_split_always_leaves_both_sides(self):
        recs = self.recs(2, split=None)
        split_records(recs, 0.9, np.random.default_rng(0))
        tags = sorted(r.split for r in recs)
        assert tags == ["train", "val"]

    def test_split_deterministic(self):
        a = self.recs(9, split=None)
        b = self.recs(9, split=None)
        split_records(a, 0.3, np.random.default_rng(5))
        split_records(b, 0.3, np.random.default_rng(5))
        assert [r.split for r in a] == [r.split for r in b]

    def test_split_validation(self):
        with pytest.raises(ValidationError):
            split_records(self.recs(1), 0.2, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            split_records(self.recs(3), 0.0, np.random.default_rng(0))

    def test_negative_count_rejected(self):
        with pytest.raises(ValidationError):
            RegionRecord(0, -1.0, np.array([0]))


class TestRegionLossGrad:
    def setup(self, use_log_loss, use_occupancy, seed_scan=range(40)):
        """A kink-safe tiny problem for finite-difference checks."""
        cfg = TrainConfig(
            weight_decay_grid=(0.0,),
            dropout=0.0,
            use_log_loss=use_log_loss,
            use_occupancy=use_occupancy,
        )
        rng = np.random.default_rng(31)
        feats = rng.normal(size=(6, 2))
        pixels = PixelBatch(feats, np.arange(6), np.array([0, 0, 0, 1, 1, 1]),
                            rng.uniform(1.0, 3.0, size=6))
        batch = [
            RegionRecord(0, 5.0, np.array([0, 1, 2]), split="train"),
            RegionRecord(1, 2.0, np.array([3, 4, 5]), split="train"),
        ]
        mode = "occupancy" if use_occupancy else "direct"
        for s in seed_scan:
            params = init_params(["a", "b"], seed=s, hidden=3, dropout=0.0,
                                 output_mode=mode)
            occ, cache = forward_occupancy(params, pixels, mode="infer",
                                           return_cache=True)
            margin = min(np.abs(z).min() for z in cache["pre"][:3])
            per_cell = occ * pixels.buildings if use_occupancy else occ
            c_hat = np.array([per_cell[:3].sum(), per_cell[3:].sum()])
            c = np.array([5.0, 2.0])
            # stay away from the ReLU kink, the L1 sign flip, and the clamp
            if margin > 1e-3 and np.abs(c_hat - c).min() > 1e-2 \
                    and c_hat.min() > 1e-4:
                return params, pixels, batch, cfg
        pytest.fail("no kink-safe configuration found")

    @pytest.mark.parametrize("use_log_loss", [True, False])
    @pytest.mark.parametrize("use_occupancy", [True, False])
    def test_gradcheck(self, use_log_loss, use_occupancy):
        params, pixels, batch, cfg = self.setup(use_log_loss, use_occupancy)
        _, grads = region_loss_and_grad(params, pixels, batch, cfg, rng_seed=0)
        eps = 1e-6
        worst = 0.0
        for leaf, g in zip(param_leaves(params), grads):
            flat, gflat = leaf.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up, _ = region_loss_and_grad(params, pixels, batch, cfg, 0)
                flat[i] = orig - eps
                dn, _ = region_loss_and_grad(params, pixels, batch, cfg, 0)
                flat[i] = orig
                fd = (up - dn) / (2 * eps)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-6

    def test_loss_value_matches_hand_formula(self):
        params, pixels, batch, cfg = self.setup(True, True)
        loss, _ = region_loss_and_grad(params, pixels, batch, cfg, rng_seed=0)
        occ = forward_occupancy(params, pixels, mode="infer")
        per_cell = occ * pixels.buildings
        c_hat = np.array([per_cell[:3].sum(), per_cell[3:].sum()])
        expected = log_l1_loss(c_hat, np.array([5.0, 2.0]), cfg.eps_log).sum()
        assert loss == pytest.approx(expected, rel=1e-14)

    def test_rejects_empty_batch_and_empty_region(self):
        params, pixels, batch, cfg = self.setup(True, True)
        with pytest.raises(ValidationError):
            region_loss_and_grad(params, pixels, [], cfg, 0)
        empty = RegionRecord(7, 1.0, np.array([], dtype=np.int64),
                             split="train")
        with pytest.raises(ValidationError):
            region_loss_and_grad(params, pixels, [empty], cfg, 0)


class TestAdamStep:
    def test_single_step_hand_oracle(self):
        cfg = TrainConfig(learning_rate=0.1)
        p = init_params(["a"], seed=0, hidden=1, dropout=0.0)
        leaves = param_leaves(p)
        before = [x.copy() for x in leaves]
        grads = [np.full_like(x, 0.5) for x in leaves]
        state = _AdamState([np.zeros_like(x) for x in leaves],
                           [np.zeros_like(x) for x in leaves])
        _adam_step(p, grads, state, cfg, weight_decay=0.0)
        # bias-corrected first step: update = g / (|g| + eps)
        expected_delta = -0.1 * 0.5 / (0.5 + cfg.adam_eps)
        for x, x0 in zip(leaves, before):
            assert np.allclose(x - x0, expected_delta, rtol=1e-12)
        assert state.t == 1

    def test_weight_decay_is_decoupled(self):
        cfg = TrainConfig(learning_rate=0.1)
        p0 = init_params(["a"], seed=1, hidden=2, dropout=0.0)
        p1 = p0.copy()
        grads = [np.full_like(x, 0.3) for x in param_leaves(p0)]
        s0 = _AdamState([np.zeros_like(x) for x in param_leaves(p0)],
                        [np.zeros_like(x) for x in param_leaves(p0)])
        s1 = _AdamState([np.zeros_like(x) for x in param_leaves(p1)],
                        [np.zeros_like(x) for x in param_leaves(p1)])
        _adam_step(p0, grads, s0, cfg, weight_decay=0.0)
        _adam_step(p1, [g.copy() for g in grads], s1, cfg, weight_decay=0.01)
        # decoupled decay shifts the step by exactly lr * wd * leaf value
        q = init_params(["a"], seed=1, hidden=2, dropout=0.0)
        for a, b, orig in zip(param_leaves(p0), param_leaves(p1),
                              param_leaves(q)):
            assert np.allclose(a - b, 0.1 * 0.01 * orig, rtol=1e-10, atol=1e-18)
        # and the moment buffers are identical: decay never enters them
        for ma, mb in zip(s0.m, s1.m):
            assert np.array_equal(ma, mb)
        for va, vb in zip(s0.v, s1.v):
            assert np.array_equal(va, vb)


class TestBuildTrainingView:
    def test_fine_level_records(self):
        ds = hand_dataset()
        view = build_training_view(ds, "fine")
        assert view.name == "hand"
        assert view.covariates == ["a", "b"]
        assert view.roles == ["zscore", "zscore"]
        assert view.n_zero_pixel_regions == 0
        assert [r.region_id for r in view.records] == [0, 1]
        assert [r.count for r in view.records] == [30.0, 20.0]
        # region 0 holds built cells 0,1,5; region 1 holds 8,10,11
        r0, r1 = view.records
        assert view.cell_index[r0.rows].tolist() == [0, 1, 5]
        assert view.cell_index[r1.rows].tolist() == [8, 10, 11]
        assert view.buildings[r0.rows].tolist() == [2.0, 1.0, 3.0]
        assert (view.region_ids[r0.rows] == 0).all()
        # raw features are gathered per cell, NaN-free here
        assert np.allclose(view.raw_features[r0.rows][:, 0],
                           ds.stack.values[0, [0, 1, 5]].astype(np.float64))

    def test_coarse_level_pools_everything(self):
        ds = hand_dataset()
        view = build_training_view(ds, "coarse")
        assert len(view.records) == 1
        assert view.records[0].count == 50.0
        assert view.records[0].rows.size == 6

    def test_zero_pixel_region_warns(self):
        ds = hand_dataset(drop_region_one_buildings=True)
        with pytest.warns(UserWarning, match="no built cell"):
            view = build_training_view(ds, "fine")
        assert view.n_zero_pixel_regions == 1
        assert [r.region_id for r in view.records] == [0]

    def test_bad_level(self):
        with pytest.raises(ValidationError):
            build_training_view(hand_dataset(), "medium")


def quick_fit_config(**kw):
    base = dict(
        learning_rate=3e-3,
        weight_decay_grid=(0.0,),
        max_epochs=30,
        patience=30,
        regions_per_step=8,
        hidden=8,
        dropout=0.0,
        use_augmentation=False,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestFit:
    def view(self, tiny_world, seed=0):
        ds, _ = tiny_world
        view = build_training_view(ds, "fine")
        split_records(view.records, 0.25, np.random.default_rng(seed))
        return view

    def test_loss_decreases_and_log_schema(self, tiny_world):
        view = self.view(tiny_world)
        res = fit(view, quick_fit_config())
        assert res.n_diverged_runs == 0
        assert res.best_weight_decay == 0.0
        rows = res.log
        assert len(rows) == 30
        assert list(rows[0].keys()) == TRAIN_LOG_COLUMNS
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]
        # the fit keeps the best validation MAPE seen anywhere in the run
        assert res.best_val_mape == pytest.approx(
            min(r["val_mape"] for r in rows), rel=1e-12
        )

    def test_deterministic(self, tiny_world):
        a = fit(self.view(tiny_world), quick_fit_config(use_augmentation=True))
        b = fit(self.view(tiny_world), quick_fit_config(use_augmentation=True))
        for la, lb in zip(param_leaves(a.params), param_leaves(b.params)):
            assert np.array_equal(la, lb)
        assert a.log == b.log
        assert a.best_val_mape == b.best_val_mape

    def test_weight_decay_grid_is_searched(self, tiny_world):
        res = fit(self.view(tiny_world),
                  quick_fit_config(weight_decay_grid=(0.0, 1e-3)))
        wds = {r["weight_decay"] for r in res.log}
        assert wds == {0.0, 1e-3}
        assert res.best_weight_decay in wds

    def test_output_mode_follows_occupancy_switch(self, tiny_world):
        res = fit(self.view(tiny_world),
                  quick_fit_config(max_epochs=2, patience=2,
                                   use_occupancy=False))
        assert res.params.output_mode == "direct"

    def test_divergence_raises(self, tiny_world):
        # the log loss keeps even absurd steps finite, so the step size has
        # to push intermediate products past the float64 exponent range
        with pytest.raises(NumericError, match="diverged"), \
                warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit(self.view(tiny_world),
                quick_fit_config(learning_rate=1e200, max_epochs=10))

    def test_requires_split_tags(self, tiny_world):
        ds, _ = tiny_world
        view = build_training_view(ds, "fine")  # nothing tagged
        with pytest.raises(ValidationError, match="train and val"):
            fit(view, quick_fit_config())

    def test_rejects_covariate_disagreement(self, tiny_world):
        a = self.view(tiny_world)
        b = self.view(tiny_world)
        b.covariates = list(reversed(b.covariates))
        with pytest.raises(ValidationError, match="disagree"):
            fit([a, b], quick_fit_config())

    def test_stats_come_from_train_rows_only(self, tiny_world):
        view = self.view(tiny_world)
        res = fit(view, quick_fit_config(max_epochs=1, patience=1))
        train_rows = np.concatenate(
            [r.rows for r in view.records_in("train")])
        from popmap.model import compute_feature_stats

        expected = compute_feature_stats(view.raw_features[train_rows],
                                         view.roles)
        assert np.array_equal(res.params.stats.mean, expected.mean)
        assert np.array_equal(res.params.stats.std, expected.std)
