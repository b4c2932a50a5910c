"""Per-layer weight sharing: 1-D k-means codebooks and the shared-centroid update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ITER = 100


@dataclass
class Codebook:
    centroids: np.ndarray       # float64, len == k
    assignments: np.ndarray     # int64, one per surviving weight
    requested_k: int
    iterations: int = 0
    inertia: list = field(default_factory=list)  # objective after every Lloyd step

    @property
    def k(self):
        return int(self.centroids.size)

    @property
    def shrunk(self):
        return self.k < self.requested_k

    def reconstruct(self):
        return self.centroids[self.assignments]


def _assign(values, centroids):
    order = np.argsort(centroids, kind="stable")
    c = centroids[order]
    edges = (c[1:] + c[:-1]) / 2
    return order[np.searchsorted(edges, values, side="left")]


def kmeans_quantize(values, k_clusters, max_iter=MAX_ITER):
    """Lloyd's algorithm with centroids initialised evenly over ``[min, max]``.

    With ``k_clusters`` or fewer distinct values the codebook is just those
    values, so ``k`` shrinks and the quantization is exact. Empty clusters keep
    their previous centroid.
    """
    w = np.asarray(values, dtype=np.float64).ravel()
    if k_clusters < 1:
        raise ValueError("k_clusters must be >= 1")
    distinct = np.unique(w)
    if distinct.size <= k_clusters:
        assign = np.searchsorted(distinct, w)
        return Codebook(distinct.copy(), assign.astype(np.int64), int(k_clusters),
                        0, [0.0])

    centroids = np.linspace(w.min(), w.max(), k_clusters)
    assign = _assign(w, centroids)
    inertia = [float(((w - centroids[assign]) ** 2).sum())]
    it = 0
    for it in range(1, max_iter + 1):
        sums = np.bincount(assign, weights=w, minlength=k_clusters)
        counts = np.bincount(assign, minlength=k_clusters)
        filled = counts > 0
        centroids = centroids.copy()
        centroids[filled] = sums[filled] / counts[filled]
        new = _assign(w, centroids)
        inertia.append(float(((w - centroids[new]) ** 2).sum()))
        if np.array_equal(new, assign):
            break
        assign = new
    return Codebook(centroids, assign.astype(np.int64), int(k_clusters), it, inertia)


def shared_centroid_step(centroids, assignments, grads, lr):
    """Each centroid moves by ``-lr`` times the summed gradient of the weights sharing it."""
    g = np.bincount(assignments, weights=np.asarray(grads, dtype=np.float64).ravel(),
                    minlength=centroids.size)
    return centroids - lr * g


def compression_rate(n, b, k_clusters):
    """``n*b / (n*log2(k) + k*b)``: n weights of b bits shared through k centroids."""
    if n <= 0 or b <= 0 or k_clusters <= 0:
        raise ValueError("n, b and k_clusters must be positive")
    return n * b / (n * math.log2(k_clusters) + k_clusters * b)
