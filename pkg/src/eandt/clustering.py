"""Euclidean region growing and seeded K-means++."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eandt import _kernels
from eandt.labels import SemanticLabel


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for a task identified by integer ``keys``.

    The stream depends only on ``(seed, *keys)``, so work units can run in
    any order or on any worker and still draw the same numbers.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit integer seed for the task identified by ``keys``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass
class Instance:
    label: SemanticLabel
    point_ids: np.ndarray

    def __len__(self):
        return len(self.point_ids)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    sse: float
    iterations: int
    sse_history: list[float]


def region_grow(positions: np.ndarray, ids, distance_threshold: float, min_points: int,
                label: SemanticLabel = SemanticLabel.OTHER) -> list[Instance]:
    """Split ``ids`` into groups connected by gaps of at most ``distance_threshold``.

    Groups smaller than ``min_points`` are dropped. Instances are ordered by
    their lowest point id and hold sorted ids.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("region_grow needs at least one point")
    if not distance_threshold > 0:
        raise ValueError("distance_threshold must be positive")
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    ids = np.sort(ids)
    comp = _kernels.threshold_components(positions[ids], distance_threshold)
    order = np.argsort(comp, kind="stable")
    bounds = np.flatnonzero(np.diff(comp[order])) + 1
    out = []
    for group in np.split(order, bounds):
        if group.size >= min_points:
            out.append(Instance(SemanticLabel(label), ids[group]))
    return out


def _kmeanspp_seed(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _kernels.assign_nearest(X, X[chosen])[1]
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0:
            cum = np.cumsum(d2)
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            pick = min(pick, n - 1)
            while d2[pick] == 0:  # guard against landing on a zero-width bin
                pick -= 1
        else:
            pick = int(rng.integers(n))
        chosen.append(pick)
        d2 = np.minimum(d2, _kernels.assign_nearest(X, X[pick:pick + 1])[1])
    return X[chosen].copy()


def _update_centroids(X, labels, d2, k):
    counts = np.bincount(labels, minlength=k)
    C = np.empty((k, X.shape[1]))
    for j in range(X.shape[1]):
        C[:, j] = np.bincount(labels, weights=X[:, j], minlength=k)
    nonempty = counts > 0
    C[nonempty] /= counts[nonempty, None]
    empty = np.flatnonzero(~nonempty)
    if empty.size:
        d2 = d2.copy()
        for j in empty:
            far = int(np.argmax(d2))
            C[j] = X[far]
            d2[far] = -1.0
    return C


def _lloyd(X, k, rng, max_iter, tol):
    C = _kmeanspp_seed(X, k, rng)
    labels, d2 = _kernels.assign_nearest(X, C)
    sse = float(d2.sum())
    history = [sse]
    it = 0
    while it < max_iter:
        newC = _update_centroids(X, labels, d2, k)
        new_labels, new_d2 = _kernels.assign_nearest(X, newC)
        new_sse = float(new_d2.sum())
        it += 1
        history.append(new_sse)
        improvement = sse - new_sse
        C, labels, d2 = newC, new_labels, new_d2
        converged = new_sse == 0.0 or improvement <= tol * sse
        sse = new_sse
        if converged:
            break
    return KMeansResult(labels, C, sse, it, history)


def kmeans_pp(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4,
              n_init: int = 1) -> KMeansResult:
    """K-means with k-means++ seeding and Lloyd iterations.

    Args:
        points: (N, d) array.
        k: number of clusters, ``1 <= k <= N``.
        seed: RNG seed; the result is a pure function of inputs and seed.
        max_iter: Lloyd iteration cap.
        tol: stop when the relative SSE improvement drops below this.
        n_init: independent restarts; the lowest-SSE run is returned.

    Returns:
        KMeansResult whose assignments are nearest-centroid (ties to the
        lowest cluster index) with respect to the returned centroids.
    """
    X = np.ascontiguousarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    best = None
    for r in range(max(1, n_init)):
        res = _lloyd(X, k, substream(seed, 0x6B6D, r), max_iter, tol)
        if best is None or res.sse < best.sse:
            best = res
    return best
