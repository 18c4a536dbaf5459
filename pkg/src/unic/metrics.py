"""Cluster-to-class matching and partition agreement scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .embed_store import SplitSpec


def _kuhn_munkres(cost: np.ndarray):
    """O(K^3) shortest-augmenting-path assignment.

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are optimal dual
    potentials: ``cost[i, j] - u[i] - v[j] >= 0`` with equality on the
    returned assignment.
    """
    k = cost.shape[0]
    inf = math.inf
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    p = np.zeros(k + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = np.full(k + 1, inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(k, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(k)
    return row_to_col, u[1:], v[1:]


def _lexicographic_min(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching of the boolean ``tight``
    graph, starting from the perfect matching ``match``."""
    k = tight.shape[0]
    match = match.copy()
    col_owner = np.empty(k, dtype=np.int64)
    col_owner[match] = np.arange(k)
    fixed_col = np.zeros(k, dtype=bool)

    def augment(row, target, banned, seen):
        # find an alternating path giving `row` a new column, ending at `target`
        for c in np.flatnonzero(tight[row] & ~banned & ~seen):
            seen[c] = True
            if c == target or augment(col_owner[c], target, banned, seen):
                match[row] = c
                col_owner[c] = row
                return True
        return False

    for i in range(k):
        for c in np.flatnonzero(tight[i] & ~fixed_col):
            if c == match[i]:
                break
            saved = match.copy(), col_owner.copy()
            r, old = col_owner[c], match[i]
            banned = fixed_col.copy()
            banned[c] = True
            if augment(r, old, banned, np.zeros(k, dtype=bool)):
                match[i], col_owner[c] = c, i
                break
            match[:], col_owner[:] = saved
        fixed_col[match[i]] = True
    return match


def hungarian(cost) -> np.ndarray:
    """Minimum-cost permutation ``perm`` (row i -> column perm[i]).

    Among equal-cost optima the lexicographically smallest permutation wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    k = cost.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    match, u, v = _kuhn_munkres(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * k * max(1.0, float(np.abs(cost).max()))
    return _lexicographic_min(reduced <= tol, match)


def confusion(pred, truth, k: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    for name, a in (("pred", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ValueError(f"{name} id out of range [0, {k})")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (pred, truth), 1)
    return out


def clustering_accuracy(pred, truth, k: int) -> tuple[float, np.ndarray]:
    conf = confusion(pred, truth, k)
    matching = hungarian(-conf)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty input")
    return float(conf[np.arange(k), matching].sum() / total), matching


def _contingency(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    if pred.size == 0:
        raise ValueError("empty input")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Mutual information normalized by the arithmetic mean of the entropies."""
    table = _contingency(pred, truth)
    n = table.sum()
    a, b = table.sum(axis=1), table.sum(axis=0)
    ha, hb = _entropy(a), _entropy(b)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(a, b)[nz]
    mi = float((table[nz] / n * np.log(n * table[nz] / outer)).sum())
    return float(min(max(mi / ((ha + hb) / 2.0), 0.0), 1.0))


def ari(pred, truth) -> float:
    table = _contingency(pred, truth)
    n = int(table.sum())
    if n < 2:
        raise ValueError("ari needs at least two samples")

    def pairs(x):
        return sum(int(v) * (int(v) - 1) // 2 for v in np.ravel(x))

    index = pairs(table)
    sa, sb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) // 2
    # (index - E) / (max - E) scaled by 2 * total to stay in exact integers
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        return 1.0
    return num / den


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    ari: float
    matching: list[int]
    acc_all: float | None = None
    acc_old: float | None = None
    acc_new: float | None = None
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"acc": self.acc, "nmi": self.nmi, "ari": self.ari}
        if self.acc_all is not None:
            d.update(acc_all=self.acc_all, acc_old=self.acc_old, acc_new=self.acc_new)
        d["matching"] = list(self.matching)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False)


def clustering_report(pred, truth, k: int) -> MetricsReport:
    acc, matching = clustering_accuracy(pred, truth, k)
    return MetricsReport(acc, nmi(pred, truth), ari(pred, truth) if len(pred) > 1 else 1.0,
                         matching.tolist())


def gcd_report(pred, truth, split: SplitSpec, k: int) -> MetricsReport:
    """All/Old/New accuracy on the unlabeled samples under one matching."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.shape[0] != split.n:
        raise ValueError("pred, truth and split must cover the same samples")
    unl = ~split.labeled_mask
    if not unl.any():
        raise ValueError("no unlabeled samples")
    p, t = pred[unl], truth[unl]
    conf = confusion(p, t, k)
    matching = hungarian(-conf)
    hit = matching[p] == t
    old = np.isin(t, sorted(split.old_classes))
    n_old, n_new = int(old.sum()), int((~old).sum())
    hits_old, hits_new = int(hit[old].sum()), int(hit[~old].sum())
    return MetricsReport(
        acc=float(hit.mean()),
        nmi=nmi(p, t),
        ari=ari(p, t) if p.size > 1 else 1.0,
        matching=matching.tolist(),
        acc_all=float(hit.mean()),
        acc_old=hits_old / n_old if n_old else float("nan"),
        acc_new=hits_new / n_new if n_new else float("nan"),
        counts={"unlabeled": int(p.size), "old": n_old, "new": n_new,
                "hits_old": hits_old, "hits_new": hits_new},
    )
