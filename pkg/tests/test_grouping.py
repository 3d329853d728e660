import json

import numpy as np
import pytest
from sklearn.metrics import silhouette_samples as sk_silhouette_samples

from ebbench.core import Dataset, EvalRecord
from ebbench.grouping import (
    ClusterAssignment,
    DegenerateGeometryError,
    assignment_lines,
    cluster_embeddings,
    group_dataset,
    kmeans,
    merge_small_groups,
    silhouette_samples,
    silhouette_score,
)
from ebbench.metrics import MetricKind


def blobs(rng, centers, n=20, spread=0.1):
    return np.vstack([rng.normal(c, spread, size=(n, len(c))) for c in centers])


class TestSilhouette:
    def test_matches_reference(self, rng):
        X = rng.normal(size=(60, 3))
        labels = rng.integers(0, 4, 60)
        np.testing.assert_allclose(silhouette_samples(X, labels), sk_silhouette_samples(X, labels), atol=1e-10)

    def test_singleton_zero(self):
        X = np.array([[0.0], [0.1], [5.0]])
        s = silhouette_samples(X, np.array([0, 0, 1]))
        assert s[2] == 0.0
        np.testing.assert_allclose(s, sk_silhouette_samples(X, [0, 0, 1]))


class TestCluster:
    def test_two_blobs(self, rng):
        X = blobs(rng, [(0.0, 0.0), (10.0, 10.0)])
        a = cluster_embeddings(X, range(2, 6), seed=0)
        assert a.k == 2
        assert a.silhouette > 0.8
        assert a.silhouette == pytest.approx(float(sk_silhouette_samples(X, a.labels).mean()), abs=1e-12)
        assert set(a.sizes()) == {20}

    def test_three_points(self):
        a = cluster_embeddings(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]), [2], seed=0)
        assert a.k == 2 and a.labels.shape == (3,)
        assert len(a.centroids) == 2

    def test_identical_points(self):
        with pytest.raises(DegenerateGeometryError):
            cluster_embeddings(np.ones((5, 2)), [2])

    def test_empty_range(self, rng):
        with pytest.raises(ValueError):
            cluster_embeddings(rng.normal(size=(5, 2)), [])

    def test_k_out_of_range(self, rng):
        with pytest.raises(ValueError):
            cluster_embeddings(rng.normal(size=(5, 2)), [5])

    def test_deterministic(self, rng):
        X = blobs(rng, [(0, 0), (3, 0), (0, 3)], spread=1.0)
        a = cluster_embeddings(X, range(2, 5), seed=7)
        b = cluster_embeddings(X, range(2, 5), seed=7)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_kmeans_objective_not_worse_than_truth(self, rng):
        X = blobs(rng, [(0, 0), (4, 0), (0, 4)], spread=0.5)
        truth = np.repeat(np.arange(3), 20)
        wcss_truth = sum(((X[truth == j] - X[truth == j].mean(0)) ** 2).sum() for j in range(3))
        _, _, wcss = kmeans(X, 3, seed=0)
        assert wcss <= wcss_truth + 1e-9

    def test_assignment_validation(self):
        with pytest.raises(ValueError):
            ClusterAssignment(np.array([0, 2]), np.zeros((2, 1)), 2, 0)


class TestMerge:
    def _assign(self, X, labels):
        labels = np.asarray(labels)
        k = labels.max() + 1
        return ClusterAssignment(labels, np.array([X[labels == j].mean(0) for j in range(k)]), k, 0)

    def test_single_survivor(self, rng):
        X = np.vstack([rng.normal(0, 1, (100, 2)), rng.normal(9, 1, (3, 2))])
        out = merge_small_groups(self._assign(X, [0] * 100 + [1] * 3), 20, X)
        assert out.k == 1 and out.sizes().tolist() == [103]

    def test_unchanged(self, rng):
        X = rng.normal(size=(95, 2))
        labels = [0] * 30 + [1] * 25 + [2] * 40
        out = merge_small_groups(self._assign(X, labels), 20, X)
        np.testing.assert_array_equal(out.labels, labels)

    def test_small_clusters_near_each_other(self):
        # 30 points near the origin; two clusters of 5 at x=10 and x=11
        rng = np.random.default_rng(3)
        big = rng.normal(0, 0.5, (30, 2))
        c1 = rng.normal(0, 0.1, (5, 2)) + [10, 0]
        c2 = rng.normal(0, 0.1, (5, 2)) + [11, 0]
        X = np.vstack([big, c1, c2])
        labels = np.array([0] * 30 + [1] * 5 + [2] * 5)
        out = merge_small_groups(self._assign(X, labels), 10, X)
        # brute force: dissolve cluster 1 first (tie on size, lower index), its points go to the
        # nearest remaining centroid (cluster 2), which then has 10 members and survives
        cent = {0: big.mean(0), 2: c2.mean(0)}
        expect = labels.copy()
        for i in range(30, 35):
            expect[i] = min(cent, key=lambda j: np.sum((X[i] - cent[j]) ** 2))
        assert out.sizes().tolist() == [30, 10]
        np.testing.assert_array_equal(out.labels, np.where(expect == 2, 1, 0))


def test_assignment_lines_and_group_dataset(rng):
    X = blobs(rng, [(0.0, 0.0), (8.0, 8.0)], n=30)
    recs = []
    for i, x in enumerate(X):
        for m in ("a", "b"):
            recs.append(EvalRecord(f"e{i}", m, "t", 1.0, None, None, tuple(x)))
    ids, a = group_dataset(Dataset(tuple(recs), MetricKind.BINARY, 2), range(2, 5), seed=0, min_size=10)
    assert len(ids) == 60 and a.k == 2
    lines = assignment_lines(ids, a.labels)
    obj = json.loads(lines[0])
    assert set(obj) == {"example_id", "group"} and obj["group"].startswith("cluster")
