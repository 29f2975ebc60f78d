"""Lloyd's K-Means with k-means++ seeding, deterministic under a seed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError


@dataclass(frozen=True)
class ClusterConfig:
    n_clusters: int = 50
    max_iters: int = 100
    init: str = "kmeans++"
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.init not in ("kmeans++", "random"):
            raise ConfigError(f"unknown init {self.init!r}")


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia_history: list
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(points, centers):
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(points, n, rng):
    k = len(points)
    chosen = [int(rng.integers(k))]
    closest = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, n):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(k, p=closest / total))
        else:
            # fewer distinct points than clusters
            free = np.setdiff1d(np.arange(k), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return points[chosen].copy()


def _update(points, labels, n):
    """Cluster means; an empty cluster takes over the point farthest from its own center."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=n)
    if (counts == 0).any():
        centers = _means(points, labels, n, counts)
        for empty in np.flatnonzero(counts == 0):
            d = ((points - centers[labels]) ** 2).sum(1)
            d[counts[labels] < 2] = -1.0
            far = int(np.argmax(d))
            counts[labels[far]] -= 1
            labels[far] = empty
            counts[empty] = 1
            centers = _means(points, labels, n, counts)
    return _means(points, labels, n, counts), labels


def _means(points, labels, n, counts):
    sums = np.zeros((n, points.shape[1]))
    np.add.at(sums, labels, points)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = sums / counts[:, None]
    return np.where(counts[:, None] > 0, out, 0.0)


def kmeans(points, cfg: ClusterConfig, rng: np.random.Generator | None = None) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("kmeans expects a 2-D array of points")
    k, n = len(points), cfg.n_clusters
    if n > k:
        raise ConfigError(f"n_clusters={n} exceeds number of points {k}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    if cfg.init == "kmeans++":
        centers = _kmeanspp(points, n, rng)
    else:
        centers = points[rng.choice(k, size=n, replace=False)].copy()

    d = _sq_dists(points, centers)
    labels = d.argmin(1)
    history = [float(d[np.arange(k), labels].sum())]
    n_iter = 0
    converged = False
    for n_iter in range(1, cfg.max_iters + 1):
        centers, labels = _update(points, labels, n)
        history.append(float(((points - centers[labels]) ** 2).sum()))
        d = _sq_dists(points, centers)
        new_labels = d.argmin(1)
        # keep the current label when it is already among the closest (no spurious flips)
        cur = d[np.arange(k), labels]
        new_labels = np.where(cur <= d[np.arange(k), new_labels], labels, new_labels)
        history.append(float(d[np.arange(k), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    if not converged:
        centers, labels = _update(points, labels, n)
        history.append(float(((points - centers[labels]) ** 2).sum()))
    return KMeansResult(labels.astype(np.int64), centers, history, n_iter)
