"""Synthetic multi-view generation, partitions, export."""

import logging

import numpy as np
import pytest

from innet.datagen import (
    MultiViewDataset,
    bayes_accuracy_single_view,
    load_dataset,
    make_views,
    mean_single_view_bayes,
    partition,
    save_dataset,
    synth_gaussian_classes,
)

from helpers import softmax_regression_accuracy


def build(q=400, d=8, k=3, separation=5.0, sigmas=(0.5, 1.5), seed=0, view_seed=1):
    base, labels = synth_gaussian_classes(q, d, k, separation, seed)
    return make_views(base, labels, list(sigmas), view_seed)


class TestSynthesis:
    def test_labels_balanced_within_one(self):
        _, labels = synth_gaussian_classes(1001, 8, 4, 3.0, 0)
        counts = np.bincount(labels)
        assert counts.max() - counts.min() <= 1

    def test_pairwise_center_distances_equal_separation(self):
        base, labels = synth_gaussian_classes(50_000, 10, 4, 6.0, 1)
        centers = np.stack([base[labels == c].mean(axis=0) for c in range(4)])
        for i in range(4):
            for j in range(i + 1, 4):
                dist = np.linalg.norm(centers[i] - centers[j])
                assert dist == pytest.approx(6.0, rel=0.05)

    def test_class_count_guards(self):
        with pytest.raises(ValueError):
            synth_gaussian_classes(10, 8, 1, 1.0, 0)
        with pytest.raises(ValueError):
            synth_gaussian_classes(10, 3, 5, 1.0, 0)

    def test_zero_separation_is_chance_level(self):
        # Bayes estimate uses empirical class means, so give it enough
        # samples that those means collapse onto each other.
        big, big_labels = synth_gaussian_classes(40_000, 8, 4, 0.0, 2)
        big_ds = make_views(big, big_labels, [0.0], 3)
        assert bayes_accuracy_single_view(big_ds, 0, 20_000, 9) == pytest.approx(0.25, abs=0.03)
        base, labels = synth_gaussian_classes(2400, 8, 4, 0.0, 2)
        ds = make_views(base, labels, [0.0], 3)
        acc = softmax_regression_accuracy(
            ds.views[0][:2000], labels[:2000], ds.views[0][2000:], labels[2000:]
        )
        assert acc == pytest.approx(0.25, abs=0.05)

    def test_large_separation_is_linearly_separable(self):
        base, labels = synth_gaussian_classes(1200, 8, 3, 12.0, 4)
        ds = make_views(base, labels, [0.1], 5)
        acc = softmax_regression_accuracy(
            ds.views[0][:900], labels[:900], ds.views[0][900:], labels[900:]
        )
        assert acc >= 0.99


class TestViews:
    def test_zero_noise_view_equals_base(self):
        ds = build(sigmas=(0.0, 1.0))
        np.testing.assert_array_equal(ds.views[0], ds.base)

    def test_normalization_applied_before_noise(self):
        ds = build()
        np.testing.assert_allclose(ds.base.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(ds.base.std(axis=0), 1.0, atol=1e-12)

    def test_view_noise_variance(self):
        sigmas = [0.4, 1.0, 2.0, 3.0, 4.0]
        base, labels = synth_gaussian_classes(10_000, 6, 2, 4.0, 6)
        ds = make_views(base, labels, sigmas, 7)
        for j, sigma in enumerate(sigmas):
            if sigma == 0:
                continue
            noise = ds.views[j] - ds.base
            assert noise.var() == pytest.approx(sigma**2, rel=0.05)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            build(sigmas=(-1.0, 1.0))

    def test_reproducible_from_seeds(self):
        a, b = build(seed=5, view_seed=6), build(seed=5, view_seed=6)
        np.testing.assert_array_equal(a.base, b.base)
        for va, vb in zip(a.views, b.views):
            np.testing.assert_array_equal(va, vb)

    def test_bayes_accuracy_decreases_with_noise(self):
        ds = build(q=2000, sigmas=(0.2, 4.0), separation=4.0)
        clean = bayes_accuracy_single_view(ds, 0, 20_000, 11)
        noisy = bayes_accuracy_single_view(ds, 1, 20_000, 11)
        assert clean > noisy
        assert 0.0 < mean_single_view_bayes(ds, 5_000, 12) <= 1.0


class TestPartition:
    def test_inl_every_node_sees_every_sample(self):
        ds = build()
        part = partition(ds, "inl")
        assert len(part.shards) == ds.n_views
        for j, shard in enumerate(part.shards):
            assert shard.indices.shape[0] == ds.q
            np.testing.assert_array_equal(shard.x_views[0], ds.views[j])
            np.testing.assert_array_equal(shard.y, ds.labels)

    def test_fl_exp1_disjoint_blocks_cover_everything(self):
        ds = build(q=400)
        part = partition(ds, "fl-exp1")
        all_idx = np.concatenate([s.indices for s in part.shards])
        assert np.array_equal(np.sort(all_idx), np.arange(400))
        for shard in part.shards:
            assert len(shard.x_views) == ds.n_views
            np.testing.assert_array_equal(shard.y, ds.labels[shard.indices])

    def test_remainder_dropped_and_logged(self, caplog):
        ds = build(q=401)
        with caplog.at_level(logging.WARNING):
            part = partition(ds, "fl-exp1")
        assert "dropping 1" in caplog.text
        assert sum(s.indices.shape[0] for s in part.shards) == 400

    def test_shared_exp2_every_client_full_own_view(self):
        ds = build()
        part = partition(ds, "shared-exp2")
        for j, shard in enumerate(part.shards):
            assert shard.indices.shape[0] == ds.q
            np.testing.assert_array_equal(shard.x_views[0], ds.views[j])

    def test_label_alignment_across_schemes(self):
        ds = build()
        for scheme in ("inl", "fl-exp1", "sl-exp1", "shared-exp2"):
            part = partition(ds, scheme)
            for shard in part.shards:
                np.testing.assert_array_equal(shard.y, ds.labels[shard.indices])

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="scheme"):
            partition(build(), "bogus")

    def test_more_clients_than_samples_rejected(self):
        tiny = build(q=1)
        with pytest.raises(ValueError, match="split"):
            partition(tiny, "fl-exp1")


class TestExport:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = build()
        path = tmp_path / "dataset.bin"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.base, ds.base)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        for va, vb in zip(loaded.views, ds.views):
            np.testing.assert_array_equal(va, vb)
        assert loaded.sigmas == ds.sigmas
        assert loaded.seed == ds.seed

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="INDATA1"):
            load_dataset(path)

    def test_misaligned_views_rejected(self):
        with pytest.raises(ValueError):
            MultiViewDataset(
                base=np.zeros((4, 2)),
                labels=np.array([0, 1, 0, 1]),
                views=[np.zeros((3, 2))],
                sigmas=[0.0],
                seed=0,
            )
