"""k-means++ / Lloyd baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed_store import EmbeddingSet


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_trace: list[float] = field(default_factory=list)
    restart_inertias: list[float] = field(default_factory=list)


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centroid; pick any unused one
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def _lloyd(x, centroids, max_iter, tol):
    trace = []
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        point_cost = d[np.arange(x.shape[0]), assign]
        trace.append(float(point_cost.sum()))
        new = centroids.copy()
        counts = np.bincount(assign, minlength=centroids.shape[0])
        taken = np.zeros(x.shape[0], dtype=bool)
        for j in np.flatnonzero(counts == 0):
            # repair an empty cluster with the worst-fit point
            far = int(np.argmax(np.where(taken, -1.0, point_cost)))
            taken[far] = True
            counts[assign[far]] -= 1
            assign[far] = j
            counts[j] = 1
        for j in range(centroids.shape[0]):
            new[j] = x[assign == j].mean(0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(x.shape[0]), assign].sum())
    trace.append(inertia)
    return centroids, assign, inertia, it, trace


def kmeans(es: EmbeddingSet, k: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Best-inertia result over ``restarts`` k-means++ initializations."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if es.n < k:
        raise ValueError(f"n={es.n} < K={k}")
    x = es.data.astype(np.float64)
    best = None
    inertias = []
    for stream in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(stream)
        run = _lloyd(x, kmeans_plusplus(x, k, rng), max_iter, tol)
        inertias.append(run[2])
        if best is None or run[2] < best[2]:
            best = run
    centroids, assign, inertia, iters, trace = best
    return KMeansResult(centroids, assign.astype(np.int64), inertia, iters, trace, inertias)


def write_assignments(assignments, path) -> None:
    with open(path, "w") as fh:
        fh.write("index,cluster\n")
        for i, c in enumerate(np.asarray(assignments).tolist()):
            fh.write(f"{i},{c}\n")


def read_assignments(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    order = np.argsort(rows[:, 0])
    if not np.array_equal(rows[order, 0], np.arange(rows.shape[0])):
        raise ValueError("assignment indices must cover 0..n-1")
    return rows[order, 1]
