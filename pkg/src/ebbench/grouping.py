"""Subgroups from embeddings: k-means with silhouette model selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_INIT = 10
MAX_ITER = 300
REL_TOL = 1e-6


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    k: int
    seed: int
    silhouette: float | None = None
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if self.centroids.shape[0] != self.k:
            raise ValueError("need exactly k centroids")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError("labels must lie in [0, k)")
        object.__setattr__(self, "labels", labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def lloyd(X, centers, max_iter=MAX_ITER, tol=REL_TOL):
    """Lloyd iterations from ``centers``. Returns (labels, centers, wcss history)."""
    centers = centers.copy()
    k = centers.shape[0]
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new_labels = d2.argmin(1)
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point worst served by its centroid
            far = int(d2[np.arange(X.shape[0]), new_labels].argmax())
            new_labels[far] = j
            d2[far] = 0.0
            counts = np.bincount(new_labels, minlength=k)
        for j in range(k):
            centers[j] = X[new_labels == j].mean(0)
        wcss = float(((X - centers[new_labels]) ** 2).sum())
        history.append(wcss)
        converged = labels is not None and np.array_equal(labels, new_labels)
        labels = new_labels
        if converged:
            break
        if len(history) > 1 and history[-2] - wcss <= tol * max(history[-2], 1e-300):
            break
    return labels, centers, history


def kmeans(X, k: int, seed: int, n_init: int = N_INIT):
    """Best-of-``n_init`` k-means++ / Lloyd run. Returns (labels, centers, wcss)."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, hist = lloyd(X, _kmeans_pp(X, k, rng))
        if best is None or hist[-1] < best[2]:
            best = (labels, centers, hist[-1])
    return best


def silhouette_samples(X, labels) -> np.ndarray:
    """Per-point silhouette on Euclidean distances; 0 for points in singleton clusters."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    D = np.sqrt(_sq_dists(X, X))
    np.fill_diagonal(D, 0.0)
    uniq = np.unique(labels)
    sums = np.stack([D[:, labels == c].sum(1) for c in uniq], axis=1)
    counts = np.array([(labels == c).sum() for c in uniq])
    own = np.searchsorted(uniq, labels)
    n_own = counts[own]
    a = np.where(n_own > 1, sums[np.arange(len(X)), own] / np.maximum(n_own - 1, 1), 0.0)
    other = sums / counts
    other[np.arange(len(X)), own] = np.inf
    b = other.min(1)
    denom = np.maximum(a, b)
    s = np.where((n_own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return s


def silhouette_score(X, labels) -> float:
    return float(silhouette_samples(X, labels).mean())


def cluster_embeddings(embeddings, k_range: Iterable[int], seed: int = 0) -> ClusterAssignment:
    """k-means for each k in ``k_range``; keep the k with the highest mean silhouette."""
    X = np.asarray(embeddings, dtype=float)
    if X.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    n = X.shape[0]
    distinct = np.unique(X, axis=0).shape[0] if n else 0
    if distinct < 2:
        raise DegenerateGeometryError("need at least two distinct embedding vectors")
    bad = [k for k in ks if k < 2 or k > n - 1]
    if bad:
        raise ValueError(f"k values {bad} outside [2, {n - 1}]")
    scores = {}
    best = None
    for k in ks:
        if k > distinct:
            logger.info("skipping k=%d: only %d distinct points", k, distinct)
            continue
        labels, centers, _ = kmeans(X, k, seed)
        score = silhouette_score(X, labels)
        scores[k] = score
        if best is None or score > best[0]:
            best = (score, k, labels, centers)
    if best is None:
        raise DegenerateGeometryError("no k in range is feasible for these points")
    score, k, labels, centers = best
    return ClusterAssignment(labels, centers, k, seed, score, scores)


def merge_small_groups(assignment: ClusterAssignment, min_size: int, points) -> ClusterAssignment:
    """Dissolve clusters below ``min_size`` into their members' nearest remaining centroids.

    The smallest cluster (lowest index on ties) is dissolved first, centroids
    are recomputed, and the process repeats until every cluster reaches
    ``min_size`` or one cluster is left. Labels are renumbered 0..k-1 in the
    order of the original cluster indices.
    """
    if min_size < 1:
        raise ValueError("min_size must be at least 1")
    X = np.asarray(points, dtype=float)
    labels = assignment.labels.copy()
    alive = sorted(set(labels.tolist()))
    centers = {j: X[labels == j].mean(0) for j in alive}
    while len(alive) > 1:
        sizes = {j: int((labels == j).sum()) for j in alive}
        small = [j for j in alive if sizes[j] < min_size]
        if not small:
            break
        victim = min(small, key=lambda j: (sizes[j], j))
        alive.remove(victim)
        members = np.flatnonzero(labels == victim)
        C = np.array([centers[j] for j in alive])
        nearest = _sq_dists(X[members], C).argmin(1)
        labels[members] = np.array(alive)[nearest]
        for j in set(labels[members].tolist()):
            centers[j] = X[labels == j].mean(0)
        del centers[victim]
    remap = {j: i for i, j in enumerate(alive)}
    new_labels = np.array([remap[j] for j in labels], dtype=int)
    new_centers = np.array([centers[j] for j in alive])
    return ClusterAssignment(new_labels, new_centers, len(alive), assignment.seed, None, assignment.scores)


def assignment_lines(example_ids: Sequence[str], labels, prefix: str = "cluster") -> list[str]:
    width = max(2, len(str(int(np.max(labels))))) if len(labels) else 2
    return [
        json.dumps({"example_id": ex, "group": f"{prefix}{int(lab):0{width}d}"}, separators=(",", ":"))
        for ex, lab in zip(example_ids, labels)
    ]


def group_dataset(dataset, k_range, seed: int = 0, min_size: int = 50):
    """Cluster a dataset's distinct examples and return (example_ids, ClusterAssignment).

    Examples are identified by example_id; the first embedding seen for an id
    is used.
    """
    from .core import MissingFieldError

    ids, vecs = [], []
    seen = set()
    for rec in dataset.records:
        if rec.example_id in seen:
            continue
        if rec.embedding is None:
            raise MissingFieldError("embedding", f"example {rec.example_id!r}")
        seen.add(rec.example_id)
        ids.append(rec.example_id)
        vecs.append(rec.embedding)
    X = np.asarray(vecs, dtype=float)
    assignment = cluster_embeddings(X, k_range, seed)
    merged = merge_small_groups(assignment, min_size, X)
    merged = ClusterAssignment(merged.labels, merged.centroids, merged.k, seed,
                               silhouette_score(X, merged.labels) if merged.k > 1 else None, assignment.scores)
    return ids, merged
