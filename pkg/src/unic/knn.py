"""Exact Euclidean neighbor ranking.

Every anchor's ordering is the permutation of all samples sorted by the key
``(distance, index)``; the anchor itself sits at rank 0. Squared distances
are accumulated one coordinate at a time in float64, so a value produced
here is bit-identical to the textbook double loop

    acc = 0.0
    for k in range(dim):
        t = a[k] - b[k]
        acc += t * t
    dist = sqrt(acc)

on the same float32 inputs. That lets membership tests recompute a single
distance later and compare it exactly against a stored radius.
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embed_store import EmbeddingSet

BLOCK = 128


@dataclass(frozen=True)
class RankedNeighborhood:
    anchor: int
    positives: tuple[int, ...]
    negative_radius: float
    negative_tiebreak: int


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between broadcastable coordinate-major operands.

    ``a`` and ``b`` have shape ``(dim, ...)``; coordinates are summed in order.
    """
    acc = np.zeros(np.broadcast_shapes(a.shape[1:], b.shape[1:]))
    for k in range(a.shape[0]):
        t = a[k] - b[k]
        acc += t * t
    return acc


def pair_distances(es: EmbeddingSet, i, j) -> np.ndarray:
    """Distances between rows ``i`` and ``j`` (index arrays, broadcast)."""
    xt = es.data.T.astype(np.float64)
    return np.sqrt(_sq_dist(xt[:, np.asarray(i)], xt[:, np.asarray(j)]))


class NeighborhoodTable(Sequence):
    """Array-backed ``list[RankedNeighborhood]``."""

    def __init__(self, positives: np.ndarray, radius: np.ndarray, tiebreak: np.ndarray,
                 tau1: int, tau2: int):
        self.positives = positives
        self.radius = radius
        self.tiebreak = tiebreak
        self.tau1 = tau1
        self.tau2 = tau2

    def __len__(self):
        return self.positives.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        i = range(len(self))[i]
        return RankedNeighborhood(i, tuple(int(p) for p in self.positives[i]),
                                  float(self.radius[i]), int(self.tiebreak[i]))


def _ranked_block(xt: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = np.sqrt(_sq_dist(xt[:, rows, None], xt[:, None, :]))
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(dist, axis=1, kind="stable")
    return dist, order


def _blocks(n: int):
    return [np.arange(s, min(s + BLOCK, n)) for s in range(0, n, BLOCK)]


def _map_blocks(fn, n: int, workers: int):
    blocks = _blocks(n)
    if workers <= 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


def compute_neighborhoods(es: EmbeddingSet, tau1: int, tau2: int,
                          workers: int = 1) -> NeighborhoodTable:
    n = es.n
    if not 0 < tau1 < tau2 <= n:
        if tau1 >= tau2:
            raise ValueError("tau1 < tau2 required")
        raise ValueError(f"need 0 < tau1 < tau2 <= n (tau1={tau1}, tau2={tau2}, n={n})")
    xt = es.data.T.astype(np.float64)

    def work(rows):
        dist, order = _ranked_block(xt, rows)
        tie = order[:, tau2 - 1]
        return order[:, :tau1], dist[np.arange(rows.size), tie], tie

    parts = _map_blocks(work, n, workers)
    return NeighborhoodTable(
        np.concatenate([p[0] for p in parts]).astype(np.int64),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]).astype(np.int64),
        tau1, tau2)


def is_negative_many(es: EmbeddingSet, anchors, radius, tiebreak, j) -> np.ndarray:
    """Vectorized ``(d(anchor, j), j) > (radius, tiebreak)``."""
    anchors = np.asarray(anchors)
    j = np.asarray(j)
    d = pair_distances(es, anchors, j)
    return (d > radius) | ((d == radius) & (j > tiebreak))


def is_negative(es: EmbeddingSet, nb: RankedNeighborhood, j: int) -> bool:
    """True iff ``j`` ranks at ``tau2`` or later in the anchor's ordering."""
    if j == nb.anchor:
        return False
    return bool(is_negative_many(es, nb.anchor, nb.negative_radius, nb.negative_tiebreak, j))


def neighbor_accuracy_curve(es: EmbeddingSet, stride: int,
                            workers: int = 1) -> list[tuple[float, float]]:
    """Same-class rate at every ``stride``-th rank, averaged over anchors."""
    labels = es.require_labels()
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = es.n
    ranks = np.arange(0, n, stride)
    xt = es.data.T.astype(np.float64)

    def work(rows):
        _, order = _ranked_block(xt, rows)
        hits = labels[order[:, ranks]] == labels[rows, None]
        return hits.sum(axis=0)

    total = np.sum(_map_blocks(work, n, workers), axis=0)
    return [(float(r) / n, float(c) / n) for r, c in zip(ranks, total)]
