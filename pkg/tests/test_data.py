import logging

import numpy as np
import pytest

from lrbpfl.data import (
    DataError,
    Dataset,
    dirichlet_partition,
    label_shard_partition,
    load_csv,
    split_and_subsample,
    synth_clusters,
    write_csv,
)
from lrbpfl.numerics import RngStream


def blobs(seed=0, classes=10, per_class=50, dim=4, spread=1.0):
    return synth_clusters(classes, dim, per_class, spread, RngStream(seed), separation=3.0)


def assert_disjoint(shards, n):
    joined = np.concatenate(shards)
    assert joined.size == np.unique(joined).size
    assert joined.min() >= 0 and joined.max() < n


class TestSynth:
    def test_sizes_and_balance(self):
        ds = blobs(per_class=7)
        assert len(ds) == 70 and ds.dim == 4
        assert np.bincount(ds.labels).tolist() == [7] * 10

    def test_one_per_class(self):
        assert len(synth_clusters(5, 3, 1, 0.1, RngStream(0))) == 5

    def test_class_means_distinct(self):
        ds = blobs(spread=1e-9)
        means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert d[~np.eye(10, dtype=bool)].min() > 0

    def test_separable_limit(self):
        ds = synth_clusters(4, 6, 30, 1e-6, RngStream(2), separation=1.0)
        # a nearest-centre linear rule is perfect when the spread vanishes
        centres = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(4)])
        scores = ds.features @ centres.T - 0.5 * (centres**2).sum(axis=1)
        assert (scores.argmax(axis=1) == ds.labels).all()

    def test_deterministic(self):
        a, b = blobs(3), blobs(3)
        assert np.array_equal(a.features, b.features)
        assert not np.array_equal(a.features, blobs(4).features)

    def test_invalid(self):
        with pytest.raises(DataError):
            synth_clusters(0, 2, 2, 1.0, RngStream(0))
        with pytest.raises(DataError):
            synth_clusters(2, 2, 2, 0.0, RngStream(0))


class TestLabelShards:
    def test_two_of_ten_fifty_clients(self):
        ds = blobs(per_class=100)
        shards = label_shard_partition(ds, 50, 2, RngStream(1))
        assert len(shards) == 50
        assert all(np.unique(ds.labels[s]).size == 2 for s in shards)
        assert_disjoint(shards, len(ds))

    def test_homogeneous_limit(self):
        ds = blobs(per_class=40)
        shards = label_shard_partition(ds, 8, 10, RngStream(0))
        for s in shards:
            assert sorted(np.unique(ds.labels[s])) == list(range(10))
            assert np.bincount(ds.labels[s], minlength=10).tolist() == [5] * 10
        assert sum(s.size for s in shards) == len(ds)

    def test_round_robin_even(self):
        ds = blobs(per_class=50)
        shards = label_shard_partition(ds, 20, 2, RngStream(2))
        for c in range(10):
            counts = [int((ds.labels[s] == c).sum()) for s in shards if (ds.labels[s] == c).any()]
            assert max(counts) - min(counts) <= 1

    def test_empty_client_error(self):
        ds = blobs(per_class=1)
        with pytest.raises(DataError, match="fewer clients"):
            label_shard_partition(ds, 30, 1, RngStream(0))

    def test_too_many_labels(self):
        with pytest.raises(DataError):
            label_shard_partition(blobs(), 3, 11, RngStream(0))

    def test_deterministic(self):
        ds = blobs()
        a = label_shard_partition(ds, 10, 2, RngStream(5))
        b = label_shard_partition(ds, 10, 2, RngStream(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestDirichlet:
    def test_disjoint_and_complete(self):
        ds = blobs(per_class=60)
        shards = dirichlet_partition(ds, 12, 0.5, RngStream(0))
        assert_disjoint(shards, len(ds))
        assert sum(s.size for s in shards) == len(ds)
        assert all(s.size for s in shards)

    def test_large_alpha_near_uniform(self):
        # chi-squared goodness of fit against uniform, 9 dof, 99.9% critical value 27.88.
        # Shards of ~200 samples: the Dirichlet spread at alpha = 100 then adds
        # only about 2 to the statistic's expected value of 9.
        ds = blobs(per_class=200)
        shards = dirichlet_partition(ds, 10, 100.0, RngStream(1))
        for s in shards:
            h = np.bincount(ds.labels[s], minlength=10)
            expected = h.sum() / 10
            assert ((h - expected) ** 2 / expected).sum() < 27.88

    def test_small_alpha_skewed(self):
        ds = blobs(per_class=100)
        shares = []
        for seed in range(5):
            for s in dirichlet_partition(ds, 10, 0.1, RngStream(seed)):
                h = np.bincount(ds.labels[s], minlength=10)
                shares.append(h.max() / h.sum())
        assert np.median(shares) > 0.5

    def test_retry_exhaustion(self):
        ds = blobs(per_class=1, classes=2)
        with pytest.raises(DataError, match="empty"):
            dirichlet_partition(ds, 5, 0.1, RngStream(0), max_retries=3)

    def test_bad_alpha(self):
        with pytest.raises(DataError):
            dirichlet_partition(blobs(), 3, 0.0, RngStream(0))


class TestSplit:
    def shard(self, n=100, classes=4):
        g = np.random.default_rng(0)
        return Dataset(g.normal(size=(n, 3)), np.arange(n) % classes, classes)

    def test_half(self):
        train, test = split_and_subsample(self.shard(), 0.5, 1.0, RngStream(0))
        assert len(train) == 50 and len(test) == 50

    def test_stratified(self):
        train, test = split_and_subsample(self.shard(), 0.75, 1.0, RngStream(0))
        # quotas of 18.75 per class; largest remainder breaks ties by class order
        assert np.bincount(train.labels).tolist() == [19, 19, 19, 18]
        assert len(train) == 75

    def test_ten_percent_subsample(self):
        shard = self.shard(n=400)
        train, test = split_and_subsample(shard, 0.5, 0.1, RngStream(1))
        assert len(train) == 20 and len(test) == 200

    def test_disjoint(self):
        shard = self.shard()
        shard.features[:, 0] = np.arange(len(shard))
        train, test = split_and_subsample(shard, 0.6, 1.0, RngStream(2))
        ids = np.concatenate([train.features[:, 0], test.features[:, 0]])
        assert np.unique(ids).size == len(shard)

    def test_empty_train_after_subsample(self):
        with pytest.raises(DataError, match="train"):
            split_and_subsample(self.shard(n=4), 0.5, 0.1, RngStream(0))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            split_and_subsample(self.shard(), 1.0, 1.0, RngStream(0))
        with pytest.raises(DataError):
            split_and_subsample(self.shard(), 0.5, 0.0, RngStream(0))


class TestCsv:
    def test_hand_written(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.5,1.0,0\n-1,2,1\n3,4,1\n")
        ds = load_csv(p)
        assert len(ds) == 3 and ds.dim == 2 and ds.num_classes == 2
        assert ds.labels.tolist() == [0, 1, 1]

    def test_round_trip(self, tmp_path):
        ds = blobs(per_class=3)
        p = tmp_path / "rt.csv"
        write_csv(ds, p)
        again = load_csv(p)
        assert np.array_equal(again.features, ds.features)
        assert np.array_equal(again.labels, ds.labels)

    def test_fractional_label_names_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,2,0\n3,4,2.5\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "ragged.csv"
        p.write_text("1,2,0\n3,1\n")
        with pytest.raises(DataError, match="row 2"):
            load_csv(p)

    def test_non_contiguous_labels_remapped(self, tmp_path, caplog):
        p = tmp_path / "gap.csv"
        p.write_text("1,3\n2,7\n3,3\n")
        with caplog.at_level(logging.WARNING):
            ds = load_csv(p)
        assert ds.labels.tolist() == [0, 1, 0]
        assert "remapping" in caplog.text
