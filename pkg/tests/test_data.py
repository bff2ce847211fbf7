"""Dataset generators, quota arithmetic, splitting and CSV ingestion."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relufair.data import (
    BAND_OFFSET,
    CURVE_MARGIN,
    PRESETS,
    GroupedDataset,
    GroupWeightPreset,
    SplitSpec,
    imbalance,
    largest_remainder_counts,
    load_csv,
    make_gaussian_mixture,
    make_toy_boundary,
    save_csv,
    split,
    stratified_batches,
)


class TestQuotas:
    def test_utk_presets_at_5000(self):
        assert PRESETS["utk-age"].counts(5000) == [507, 182, 3878, 433]
        assert PRESETS["utk-race"].counts(5000) == [2126, 954, 725, 838, 357]

    def test_preset_weights_validated(self):
        for preset in PRESETS.values():
            assert abs(sum(preset.weights) - 1.0) < 1e-9
        with pytest.raises(ValueError):
            GroupWeightPreset("bad", (0.5, 0.6))
        with pytest.raises(ValueError):
            GroupWeightPreset("bad", (1.0, 0.0))

    def test_ties_go_to_lower_index(self):
        # quotas 1.5/1.5/1.0: one leftover seat, equal remainders
        assert largest_remainder_counts((0.375, 0.375, 0.25), 4) == [2, 1, 1]

    @given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=6),
           st.integers(10, 10000))
    @settings(max_examples=80, deadline=None)
    def test_sums_exactly_and_stays_near_quota(self, raw, n):
        w = np.asarray(raw) / np.sum(raw)
        counts = largest_remainder_counts(w, n)
        assert sum(counts) == n
        for c, q in zip(counts, w * n):
            assert q - 1.0 < c < q + 1.0


class TestGroupedDataset:
    def test_basic_accessors(self):
        ds = GroupedDataset(np.zeros((4, 2)), [0, 1, 0, 1], [0, 0, 1, 1], ("a", "b"))
        assert len(ds) == 4 and ds.dim == 2 and ds.num_groups == 2
        assert ds.num_classes == 2
        assert np.array_equal(ds.group_sizes(), [2, 2])
        assert np.array_equal(ds.group_indices(1), [2, 3])
        sub = ds.subset([0, 3])
        assert len(sub) == 2 and np.array_equal(sub.groups, [0, 1])

    @pytest.mark.parametrize("kwargs", [
        dict(features=np.zeros(4), labels=[0] * 4, groups=[0] * 4, group_names=("a",)),
        dict(features=np.zeros((4, 2)), labels=[0] * 3, groups=[0] * 4, group_names=("a",)),
        dict(features=np.zeros((4, 2)), labels=[0] * 4, groups=[1] * 4, group_names=("a",)),
        dict(features=np.zeros((4, 2)), labels=[-1] * 4, groups=[0] * 4, group_names=("a",)),
        dict(features=np.zeros((4, 2)), labels=[3] * 4, groups=[0] * 4,
             group_names=("a",), num_classes=2),
    ])
    def test_rejects_inconsistent(self, kwargs):
        with pytest.raises(ValueError):
            GroupedDataset(**kwargs)


class TestToyBoundary:
    def test_defaults(self):
        ds = make_toy_boundary(seed=0)
        assert len(ds) == 4000
        assert ds.group_names == ("majority", "minority")
        assert np.array_equal(ds.group_sizes(), [3720, 280])
        assert np.array_equal(ds.labels, ds.groups)
        assert ds.provenance["generator"] == "make_toy_boundary"

    def test_deterministic(self):
        a, b = make_toy_boundary(seed=3), make_toy_boundary(seed=3)
        assert np.array_equal(a.features, b.features)
        assert not np.array_equal(a.features, make_toy_boundary(seed=4).features)

    def test_noise_free_geometry(self):
        ds = make_toy_boundary(n=2000, noise=0.0, seed=1)
        x, y = ds.features[:, 0], ds.features[:, 1]
        minority = ds.groups == 1
        # the minority band floats strictly above the curve, majority below
        assert np.all(y[minority] >= x[minority] ** 2 + BAND_OFFSET - 1e-12)
        assert np.all(y[~minority] <= np.maximum(x[~minority] ** 2 - CURVE_MARGIN, 0.0) + 1e-12)

    @pytest.mark.parametrize("kwargs", [
        dict(n=50), dict(minority_fraction=0.0), dict(minority_fraction=0.5),
        dict(noise=-0.1),
    ])
    def test_rejects_bad_args(self, kwargs):
        with pytest.raises(ValueError):
            make_toy_boundary(**kwargs)


class TestGaussianMixture:
    def test_sizes_and_names(self):
        ds = make_gaussian_mixture(3, 4, [20, 30, 40], spread=0.5, seed=0)
        assert np.array_equal(ds.group_sizes(), [20, 30, 40])
        assert ds.group_names == ("class0", "class1", "class2")
        assert np.array_equal(ds.labels, ds.groups)
        assert ds.dim == 4

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            make_gaussian_mixture(2, 2, [20], spread=0.5, seed=0)
        with pytest.raises(ValueError):
            make_gaussian_mixture(2, 2, [20, 5], spread=0.5, seed=0)
        with pytest.raises(ValueError):
            make_gaussian_mixture(1, 2, [20], spread=0.5, seed=0)


class TestImbalance:
    def test_identity_at_full_fractions(self):
        ds = make_gaussian_mixture(2, 2, [30, 30], spread=0.5, seed=1)
        out = imbalance(ds, [1.0, 1.0], seed=9)
        assert np.array_equal(out.features, ds.features)

    def test_subsamples_per_class(self):
        ds = make_gaussian_mixture(2, 2, [40, 60], spread=0.5, seed=1)
        out = imbalance(ds, [0.5, 0.25], seed=9)
        assert np.array_equal(out.group_sizes(), [20, 15])
        assert out.provenance["imbalance"]["keep_fractions"] == [0.5, 0.25]

    def test_minimum_floor(self):
        ds = make_gaussian_mixture(2, 2, [40, 12], spread=0.5, seed=1)
        with pytest.raises(ValueError, match="minimum"):
            imbalance(ds, [1.0, 0.1], seed=0)


class TestSplit:
    def test_partition_and_stratification(self):
        ds = make_toy_boundary(n=1000, seed=2)
        tr, ev = split(ds, SplitSpec(train_fraction=0.8, seed=2))
        assert len(tr) + len(ev) == len(ds)
        for a in range(2):
            total = ds.group_sizes()[a]
            assert tr.group_sizes()[a] == round(0.8 * total)
        # disjoint reassembly: every original row appears exactly once
        joined = np.sort(np.concatenate([tr.features @ [1, 1e3], ev.features @ [1, 1e3]]))
        assert np.array_equal(joined, np.sort(ds.features @ [1, 1e3]))

    def test_deterministic_and_seed_sensitive(self):
        ds = make_toy_boundary(n=500, seed=0)
        t1, _ = split(ds, SplitSpec(0.7, seed=5))
        t2, _ = split(ds, SplitSpec(0.7, seed=5))
        t3, _ = split(ds, SplitSpec(0.7, seed=6))
        assert np.array_equal(t1.features, t2.features)
        assert not np.array_equal(t1.features, t3.features)

    def test_label_and_both_strata(self):
        ds = make_toy_boundary(n=500, seed=1)
        for mode in ("label", "both"):
            tr, ev = split(ds, SplitSpec(0.8, seed=0, stratify_by=mode))
            assert len(tr) + len(ev) == 500

    def test_tiny_stratum_rejected(self):
        ds = GroupedDataset(np.random.default_rng(0).normal(size=(5, 2)),
                            [0, 0, 0, 0, 1], [0, 0, 0, 0, 1], ("a", "b"))
        with pytest.raises(ValueError, match="stratum"):
            split(ds, SplitSpec(0.8, seed=0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SplitSpec(0.0, seed=0)
        with pytest.raises(ValueError):
            SplitSpec(0.5, seed=0, stratify_by="age")


class TestStratifiedBatches:
    def test_covers_every_index_once(self):
        groups = np.array([0] * 70 + [1] * 30)
        rng = np.random.Generator(np.random.PCG64(0))
        batches = stratified_batches(groups, 25, rng)
        flat = np.sort(np.concatenate(batches))
        assert np.array_equal(flat, np.arange(100))
        assert [len(b) for b in batches] == [25, 25, 25, 25]

    def test_minority_reaches_every_batch(self):
        groups = np.array([0] * 90 + [1] * 10)
        rng = np.random.Generator(np.random.PCG64(1))
        for batch in stratified_batches(groups, 10, rng):
            assert np.any(groups[batch] == 1)

    def test_rejects_bad_batch_size(self):
        with pytest.raises(ValueError):
            stratified_batches(np.zeros(4), 0, np.random.default_rng(0))


class TestCsv:
    def test_roundtrip(self, tmp_path):
        ds = make_toy_boundary(n=200, seed=4)
        path = str(tmp_path / "toy.csv")
        save_csv(ds, path)
        back = load_csv(path, ["f0", "f1"], "label", "group")
        assert np.array_equal(back.features, ds.features)  # repr() is lossless
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.groups, ds.groups)
        assert back.group_names == ds.group_names
        sidecar = json.load(open(path + ".meta.json"))
        assert sidecar["N"] == 200 and sidecar["group_names"] == ["majority", "minority"]

    def test_group_names_in_first_appearance_order(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("f0,label,group\n1.0,0,zeta\n2.0,1,alpha\n3.0,0,zeta\n")
        ds = load_csv(str(path), ["f0"], "label", "group")
        assert ds.group_names == ("zeta", "alpha")
        assert np.array_equal(ds.groups, [0, 1, 0])

    def test_error_rows_are_one_based(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("f0,label,group\n1.0,0,a\nx,0,a\n")
        with pytest.raises(ValueError, match="row 2"):
            load_csv(str(path), ["f0"], "label", "group")
        path.write_text("f0,label,group\n1.0,zero,a\n")
        with pytest.raises(ValueError, match="row 1.*non-integer"):
            load_csv(str(path), ["f0"], "label", "group")
        path.write_text("f0,label,group\n1.0,0\n")
        with pytest.raises(ValueError, match="row 1 has 2 fields"):
            load_csv(str(path), ["f0"], "label", "group")

    def test_structural_errors(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_csv(str(path), ["f0"], "label", "group")
        path.write_text("f0,label,group\n")
        with pytest.raises(ValueError, match="no data rows"):
            load_csv(str(path), ["f0"], "label", "group")
        path.write_text("f0,label,group\n1.0,0,a\n")
        with pytest.raises(ValueError, match="missing column"):
            load_csv(str(path), ["f9"], "label", "group")
