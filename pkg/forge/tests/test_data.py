"""Class balancing, manifest reading, and synthetic data tests."""

import numpy as np
import pytest

from ctforge.data import (
    balance_classes,
    central_window,
    collect_stage1_pools,
    collect_stage2_pools,
    make_shape_dataset,
    make_shape_image,
    read_manifest,
    split_train_holdout,
    window_to_display,
)


class TestBalanceClasses:
    def test_undersamples_majority(self):
        pools = {"infectious": list(range(910)), "non_infectious": list(range(1500))}
        balanced = balance_classes(pools, seed=0)
        assert len(balanced["infectious"]) == 910
        assert len(balanced["non_infectious"]) == 910

    def test_larger_pool_case(self):
        pools = {"infectious": list(range(3046)), "non_infectious": list(range(5000))}
        balanced = balance_classes(pools, seed=0)
        assert {name: len(v) for name, v in balanced.items()} == {
            "infectious": 3046,
            "non_infectious": 3046,
        }

    def test_already_balanced_unchanged(self):
        pools = {"a": [1, 2, 3], "b": [4, 5, 6]}
        balanced = balance_classes(pools, seed=0)
        assert balanced == pools

    def test_deterministic_per_seed(self):
        pools = {"a": list(range(100)), "b": list(range(10))}
        first = balance_classes(pools, seed=7)
        second = balance_classes(pools, seed=7)
        other = balance_classes(pools, seed=8)
        assert first == second
        assert first != other

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError, match="no samples"):
            balance_classes({"a": [], "b": [1]})

    def test_three_way(self):
        pools = {"Normal": list(range(50)), "CAP": list(range(20)), "COVID19": list(range(90))}
        balanced = balance_classes(pools, seed=1)
        assert all(len(v) == 20 for v in balanced.values())


class TestWindowing:
    def test_known_display_values(self):
        hu = np.array([[-1150, -500, 150, -3000]], dtype=np.int16)
        assert window_to_display(hu).tolist() == [[0, 128, 255, 0]]

    def test_central_window_rules(self):
        assert central_window(100) == range(10, 90)
        assert central_window(60) == range(10, 50)
        assert central_window(30) == range(0, 30)


class TestManifestReading:
    def test_reads_primary_format(self, tmp_path):
        import json

        voxels = np.full((4, 8, 8), -500, dtype=np.int16)
        (tmp_path / "v.raw").write_bytes(voxels.astype("<i2").tobytes())
        (tmp_path / "v.json").write_text(
            json.dumps({"patient_id": "v", "n_slices": 4, "height": 8, "width": 8})
        )
        (tmp_path / "labels.csv").write_text(
            "slice_index,label\n0,infectious\n1,non_infectious\n2,infectious\n"
        )
        (tmp_path / "m.csv").write_text(
            "patient_id,volume_path,diagnosis,slice_labels_path\n"
            "v,v.raw,COVID19,labels.csv\n"
            "w,v.raw,Normal,\n"
        )
        entries = read_manifest(tmp_path / "m.csv")
        assert len(entries) == 2
        assert entries[0].slice_labels == {0: True, 1: False, 2: True}

        pools = collect_stage1_pools(entries, "COVID19")
        assert len(pools["infectious"]) == 2
        assert len(pools["non_infectious"]) == 1
        assert pools["infectious"][0].shape == (512, 512, 3)
        assert pools["infectious"][0].dtype == np.uint8
        assert np.all(pools["infectious"][0] == 128)  # -500 HU at window center

        pools2 = collect_stage2_pools(entries)
        assert len(pools2["COVID19"]) == 2
        # Normal pool: 1 non-infectious labeled slice + 4 central slices of w
        assert len(pools2["Normal"]) == 5
        assert len(pools2["CAP"]) == 0


class TestShapeDataset:
    def test_shapes_and_ranges(self):
        images, labels = make_shape_dataset(per_class=4, seed=3, size=128)
        assert images.shape == (12, 128, 128, 3)
        assert images.dtype == np.uint8
        assert labels.tolist() == [0] * 4 + [1] * 4 + [2] * 4
        assert np.array_equal(images[..., 0], images[..., 1])

    def test_deterministic_per_seed(self):
        a, _ = make_shape_dataset(per_class=2, seed=5, size=64)
        b, _ = make_shape_dataset(per_class=2, seed=5, size=64)
        c, _ = make_shape_dataset(per_class=2, seed=6, size=64)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_families_differ(self):
        rng = np.random.default_rng(4)
        blob = make_shape_image("blob", rng, size=64)
        ring = make_shape_image("ring", rng, size=64)
        stripe = make_shape_image("stripe", rng, size=64)
        assert not np.array_equal(blob, ring)
        assert not np.array_equal(ring, stripe)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_shape_image("square", np.random.default_rng(0))

    def test_split_partition(self):
        images, labels = make_shape_dataset(per_class=5, seed=1, size=32)
        (tr_x, tr_y), (ho_x, ho_y) = split_train_holdout(images, labels, 0.2, seed=1)
        assert len(tr_x) + len(ho_x) == 15
        assert len(ho_x) == 3
        assert len(tr_y) == len(tr_x) and len(ho_y) == len(ho_x)
