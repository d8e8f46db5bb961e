"""Seeded k-means: k-means++ seeding, Lloyd iterations, best of several restarts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:  # all points coincide with chosen centres
            idx = rng.integers(n)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers)


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int) -> KmeansResult:
    """Lloyd iterations until assignments stop changing.

    An empty cluster is re-seeded with the point farthest from its current
    centroid, which can only lower the inertia.
    """
    C = centroids.astype(np.float64, copy=True)
    k = len(C)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        new = d.argmin(1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = d[np.arange(len(X)), new]
            # never steal the last member of another cluster
            donors = counts[new] > 1
            if not donors.any():
                break
            far = np.flatnonzero(donors)[own[donors].argmax()]
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            C[j] = X[far]
            d[:, j] = _sq_dists(X, C[j][None])[:, 0]
        for j in range(k):
            members = X[new == j]
            if len(members):
                C[j] = members.mean(0)
        history.append(float(((X - C[new]) ** 2).sum()))
        if assign is not None and np.array_equal(new, assign):
            assign = new
            break
        assign = new
    # final assignment against the final centroids
    d = _sq_dists(X, C)
    final = d.argmin(1)
    inertia = float(((X - C[final]) ** 2).sum())
    return KmeansResult(C, final, inertia, it, history)


def kmeans(X, k: int, max_iter: int = 300, restarts: int = 10, seed: int = 0) -> KmeansResult:
    """Best-inertia k-means over ``restarts`` k-means++ initialisations."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array [n, d]")
    if k < 1 or len(X) < k:
        raise ValueError(f"need at least k={k} points, got {len(X)}")
    if max_iter < 1 or restarts < 1:
        raise ValueError("max_iter and restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        res = lloyd(X, kmeans_plusplus(X, k, rng), max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best
