"""Lloyd's k-means over embedding rows.

Centroids are initialized by sampling k distinct input points uniformly
without replacement; assignment and update alternate until the largest
centroid movement drops to the tolerance or the iteration cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import rng_from


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k_eff, dim)
    assignments: np.ndarray  # (n,) cluster ids
    inertia: float  # sum of squared distances to assigned centroid
    iterations: int
    converged: bool


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = _sq_dists(points, centroids)
    assign = d2.argmin(axis=1)
    # Repair empty clusters by seizing the point farthest from its centroid.
    assigned_d2 = d2[np.arange(len(points)), assign]
    for c in range(len(centroids)):
        if not (assign == c).any():
            far = int(assigned_d2.argmax())
            assign[far] = c
            assigned_d2[far] = -1.0
    return assign


def _means(points: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    out = np.empty((k, points.shape[1]), dtype=points.dtype)
    for c in range(k):
        out[c] = points[assign == c].mean(axis=0)
    return out


def _inertia(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = points - centroids[assign]
    return float((diff * diff).sum())


def _lloyd(points, k, max_iter, tol, rng, init_centroids):
    n = len(points)
    if init_centroids is None:
        idx = rng.choice(n, size=k, replace=False)
        centroids = points[idx].copy()
    else:
        centroids = np.array(init_centroids, dtype=points.dtype)
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        assign = _assign(points, centroids)
        new_centroids = _means(points, assign, k)
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift <= tol:
            converged = True
            break
    assign = _assign(points, centroids)
    return KMeansResult(centroids, assign, _inertia(points, centroids, assign), iterations, converged)


def kmeans(
    points: np.ndarray,
    k: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    restarts: int = 1,
    init_centroids: np.ndarray | None = None,
) -> KMeansResult:
    """Cluster rows of `points` into k groups, best of `restarts` by inertia.

    When fewer points than clusters are given, the effective k shrinks to the
    point count and every point becomes its own centroid.  Passing
    `init_centroids` skips random initialization (restarts are then moot).
    """
    points = np.asarray(points)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans requires a nonempty 2-D point matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    n = len(points)
    if init_centroids is not None:
        return _lloyd(points, len(init_centroids), max_iter, tol, None, init_centroids)
    if n < k:
        return KMeansResult(points.copy(), np.arange(n), 0.0, 0, True)
    rng = rng_from(seed)
    best = None
    for _ in range(max(1, restarts)):
        res = _lloyd(points, k, max_iter, tol, rng, None)
        if best is None or res.inertia < best.inertia:
            best = res
    return best
