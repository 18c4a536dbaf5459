"""Training supervision built from mined neighborhoods: second-order cleaning,
positive/negative samplers for clustering and GCD, neighbor statistics and
the UNICNBR1 index file."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .embed_store import EmbeddingSet, FormatError, SplitSpec
from .knn import NeighborhoodTable, is_negative_many, pair_distances

MAGIC = b"UNICNBR1"
_HEADER = struct.Struct("<8sIIII")
STATS_HEADER = ("eta", "removed_fraction", "retained_purity", "removed_purity")


class Mode(str, Enum):
    CLUSTER = "cluster"
    GCD = "gcd"


class EmptyNegativeSet(ValueError):
    def __init__(self):
        super().__init__("empty negative set")


@dataclass(frozen=True)
class SupervisionConfig:
    mode: Mode = Mode.CLUSTER
    positive_source_labeled: str = "labeled"
    positive_source_unlabeled: str = "cleaned"
    negative_source_labeled: str = "mined"
    negative_source_unlabeled: str = "mined"
    labeled_negative_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        checks = {
            "positive_source_labeled": ("labeled", "mined", "cleaned"),
            "positive_source_unlabeled": ("mined", "cleaned"),
            "negative_source_labeled": ("labeled", "mined", "random"),
            "negative_source_unlabeled": ("mined", "random"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        if not 0.0 <= self.labeled_negative_fraction <= 1.0:
            raise ValueError("labeled_negative_fraction must lie in [0, 1]")

    @classmethod
    def preset(cls, name: str) -> "SupervisionConfig":
        """GCD source presets, named after their negative source.

        Labeled anchors always draw same-class labeled positives; unlabeled
        anchors draw mined or cleaned positives.
        """
        presets = {
            "random-negatives": ("labeled", "mined", "random", "random"),
            "mined-negatives": ("labeled", "cleaned", "mined", "mined"),
            "labeled-negatives": ("labeled", "cleaned", "labeled", "mined"),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        pl, pu, nl, nu = presets[name]
        return cls(Mode.GCD, pl, pu, nl, nu)


@dataclass(eq=False)
class NeighborIndex:
    """Mined positive lists plus cleaning flags and negative cutoffs.

    ``mined`` keeps the raw ``tau1`` list of every anchor, including cleaned
    ones; the cleaned list of a cleaned anchor is just the anchor.
    """

    tau1: int
    tau2: int
    eta: int
    mined: np.ndarray
    was_cleaned: np.ndarray
    union_size: np.ndarray
    negative_radius: np.ndarray
    negative_tiebreak: np.ndarray
    _exact_radius: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mined = np.asarray(self.mined, dtype=np.int64)
        self.was_cleaned = np.asarray(self.was_cleaned, dtype=bool)
        self.union_size = np.asarray(self.union_size, dtype=np.int64)
        # radii are kept at file precision so that write/read is lossless
        self.negative_radius = np.asarray(self.negative_radius, dtype=np.float32)
        self.negative_tiebreak = np.asarray(self.negative_tiebreak, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.mined.shape[0]

    def cleaned_positives(self, anchor: int) -> np.ndarray:
        if self.was_cleaned[anchor]:
            return np.array([anchor])
        return self.mined[anchor]

    def retained(self) -> np.ndarray:
        return np.flatnonzero(~self.was_cleaned)

    def check_pairing(self, es: EmbeddingSet) -> None:
        if es.n != self.n:
            raise ValueError(f"neighbor index covers n={self.n}, embeddings have n={es.n}")

    def exact_radius(self, es: EmbeddingSet) -> np.ndarray:
        # recomputed in float64 so membership agrees exactly with the ranking
        if self._exact_radius is None:
            self.check_pairing(es)
            self._exact_radius = pair_distances(es, np.arange(self.n), self.negative_tiebreak)
        return self._exact_radius

    def __eq__(self, other):
        if not isinstance(other, NeighborIndex):
            return NotImplemented
        return ((self.tau1, self.tau2, self.eta) == (other.tau1, other.tau2, other.eta)
                and np.array_equal(self.mined, other.mined)
                and np.array_equal(self.was_cleaned, other.was_cleaned)
                and np.array_equal(self.union_size, other.union_size)
                and self.negative_radius.tobytes() == other.negative_radius.tobytes()
                and np.array_equal(self.negative_tiebreak, other.negative_tiebreak))


def _union_sizes(positives: np.ndarray) -> np.ndarray:
    second = positives[positives].reshape(positives.shape[0], -1)
    second = np.sort(second, axis=1)
    return 1 + (np.diff(second, axis=1) != 0).sum(axis=1)


def second_order_union_size(neighborhoods: NeighborhoodTable, anchor: int) -> int:
    pos = neighborhoods.positives
    return int(np.unique(pos[pos[anchor]]).size)


def clean(neighborhoods: NeighborhoodTable, eta: int) -> NeighborIndex:
    if eta < 0:
        raise ValueError("eta must be >= 0")
    sizes = _union_sizes(neighborhoods.positives)
    return NeighborIndex(
        tau1=neighborhoods.tau1,
        tau2=neighborhoods.tau2,
        eta=eta,
        mined=neighborhoods.positives,
        was_cleaned=sizes > eta,
        union_size=sizes,
        negative_radius=neighborhoods.radius,
        negative_tiebreak=neighborhoods.tiebreak,
        _exact_radius=np.asarray(neighborhoods.radius, dtype=np.float64),
    )


# -- sampling ---------------------------------------------------------------

class _LabeledPool:
    """Labeled sample indices grouped by class, for O(1) uniform draws."""

    def __init__(self, labels: np.ndarray, split: SplitSpec):
        split.validate(labels)
        self.mask = split.labeled_mask
        idx = np.flatnonzero(self.mask)
        order = np.argsort(labels[idx], kind="stable")
        self.sorted_idx = idx[order]
        self.sorted_lab = labels[self.sorted_idx]
        self.labels = labels

    def same_class(self, anchors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        c = self.labels[anchors]
        lo = np.searchsorted(self.sorted_lab, c, side="left")
        hi = np.searchsorted(self.sorted_lab, c, side="right")
        if (hi <= lo).any():
            raise ValueError("no labeled samples share the anchor's class")
        return self.sorted_idx[lo + np.floor(rng.random(anchors.size) * (hi - lo)).astype(np.int64)]

    def other_class(self, anchors: np.ndarray, rng: np.random.Generator):
        """Uniform labeled sample of a different class; -1 where none exists."""
        c = self.labels[anchors]
        lo = np.searchsorted(self.sorted_lab, c, side="left")
        hi = np.searchsorted(self.sorted_lab, c, side="right")
        others = self.sorted_idx.size - (hi - lo)
        u = np.floor(rng.random(anchors.size) * np.maximum(others, 1)).astype(np.int64)
        # skip over the anchor's own class block
        pos = np.where(u < lo, u, u + (hi - lo))
        out = np.full(anchors.size, -1, dtype=np.int64)
        ok = others > 0
        out[ok] = self.sorted_idx[pos[ok]]
        return out


def _anchor_groups(anchors, split, cfg):
    """Boolean mask of anchors that use the labeled-sample sources."""
    if cfg.mode is Mode.CLUSTER or split is None:
        return np.zeros(anchors.size, dtype=bool)
    return split.labeled_mask[anchors]


def sample_positives(index: NeighborIndex, split: SplitSpec | None, cfg: SupervisionConfig,
                     anchors, rng: np.random.Generator,
                     labels: np.ndarray | None = None,
                     _pool: _LabeledPool | None = None) -> np.ndarray:
    anchors = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    use_lab = _anchor_groups(anchors, split, cfg)
    source = np.where(use_lab, cfg.positive_source_labeled, cfg.positive_source_unlabeled)
    # one uniform per anchor regardless of source keeps the rng stream aligned
    u = rng.random(anchors.size)
    width = index.mined.shape[1]
    pick = index.mined[anchors, np.floor(u * width).astype(np.int64)]
    cleaned = (source == "cleaned") & index.was_cleaned[anchors]
    out = np.where(cleaned, anchors, pick)
    lab = source == "labeled"
    if lab.any():
        pool = _pool or _LabeledPool(_need_labels(labels), split)
        out[lab] = pool.same_class(anchors[lab], rng)
    return out


def sample_negatives(index: NeighborIndex, split: SplitSpec | None, cfg: SupervisionConfig,
                     anchors, es: EmbeddingSet, rng: np.random.Generator,
                     _pool: _LabeledPool | None = None) -> np.ndarray:
    anchors = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    n = es.n
    use_lab = _anchor_groups(anchors, split, cfg)
    source = np.where(use_lab, cfg.negative_source_labeled, cfg.negative_source_unlabeled)
    out = np.full(anchors.size, -1, dtype=np.int64)

    lab = np.flatnonzero(source == "labeled")
    if lab.size:
        pool = _pool or _LabeledPool(es.require_labels(), split)
        take = rng.random(lab.size) < cfg.labeled_negative_fraction
        drawn = pool.other_class(anchors[lab[take]], rng)
        out[lab[take]] = drawn
        # anchors without a different-class labeled sample fall back to mining
        source = source.copy()
        source[lab[take][drawn < 0]] = "mined"
        source[lab[~take]] = "mined"

    rand = np.flatnonzero(source == "random")
    if rand.size:
        if n < 2:
            raise EmptyNegativeSet()
        j = rng.integers(0, n - 1, size=rand.size)
        out[rand] = j + (j >= anchors[rand])

    mined = np.flatnonzero(source == "mined")
    if mined.size:
        if index.tau2 >= n:
            raise EmptyNegativeSet()
        radius = index.exact_radius(es)
        pending = mined
        while pending.size:
            a = anchors[pending]
            j = rng.integers(0, n, size=pending.size)
            ok = is_negative_many(es, a, radius[a], index.negative_tiebreak[a], j)
            out[pending[ok]] = j[ok]
            pending = pending[~ok]
    return out


def sample_positive(index, split, cfg, anchor: int, rng, labels=None) -> int:
    return int(sample_positives(index, split, cfg, [anchor], rng, labels=labels)[0])


def sample_negative(index, split, cfg, anchor: int, es: EmbeddingSet, rng) -> int:
    return int(sample_negatives(index, split, cfg, [anchor], es, rng)[0])


def _need_labels(labels):
    if labels is None:
        raise ValueError("labeled positive source requires labels")
    return labels


# -- statistics -------------------------------------------------------------

def positive_purity(mined: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-anchor same-class rate among mined positives, self excluded."""
    anchors = np.arange(mined.shape[0])
    others = mined[:, 1:]
    if others.shape[1] == 0:
        return np.ones(mined.shape[0])
    return (labels[others] == labels[anchors, None]).mean(axis=1)


def eta_sweep(tau1: int, points: int = 10) -> list[int]:
    return sorted(set(np.round(np.linspace(tau1, tau1 * tau1, points)).astype(int).tolist()))


@dataclass
class StatsReport:
    union_histogram: dict[int, int]
    rows: list[tuple[int, float, float, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for eta, rf, rp, mp in self.rows:
            w.writerow([eta, f"{rf:.6f}", f"{rp:.6f}", f"{mp:.6f}"])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        lines = ["union_size,count"]
        lines += [f"{s},{c}" for s, c in sorted(self.union_histogram.items())]
        return "\n".join(lines) + "\n"


def neighbor_stats(index: NeighborIndex, labels, etas=None) -> StatsReport:
    """Union-size histogram and, per eta, removed fraction plus mean purity of
    retained and removed anchors (NaN for an empty group)."""
    if labels is None:
        raise ValueError("missing labels")
    labels = np.asarray(labels)
    purity = positive_purity(index.mined, labels)
    sizes, counts = np.unique(index.union_size, return_counts=True)
    etas = eta_sweep(index.tau1) if etas is None else list(etas)
    rows = []
    for eta in etas:
        removed = index.union_size > eta
        kept = ~removed
        rows.append((
            int(eta),
            float(removed.mean()),
            float(purity[kept].mean()) if kept.any() else float("nan"),
            float(purity[removed].mean()) if removed.any() else float("nan"),
        ))
    return StatsReport(dict(zip(sizes.tolist(), counts.tolist())), rows)


# -- UNICNBR1 ---------------------------------------------------------------

def write_index(index: NeighborIndex, path) -> None:
    n, width = index.mined.shape
    rec = np.dtype([("cleaned", "u1"), ("union", "<u4"), ("count", "<u4"),
                    ("pos", "<u4", (width,)), ("radius", "<f4"), ("tie", "<u4")])
    body = np.zeros(n, dtype=rec)
    body["cleaned"] = index.was_cleaned
    body["union"] = index.union_size
    body["count"] = width
    body["pos"] = index.mined
    body["radius"] = index.negative_radius
    body["tie"] = index.negative_tiebreak
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, index.tau1, index.tau2, index.eta))
        fh.write(body.tobytes())


def read_index(path, embeddings: EmbeddingSet | None = None) -> NeighborIndex:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    _, n, tau1, tau2, eta = _HEADER.unpack_from(raw)
    off = _HEADER.size
    mined = np.empty((n, min(tau1, n)), dtype=np.int64)
    cleaned = np.empty(n, dtype=bool)
    union = np.empty(n, dtype=np.int64)
    radius = np.empty(n, dtype=np.float32)
    tie = np.empty(n, dtype=np.int64)
    for i in range(n):
        if len(raw) < off + 9:
            raise FormatError("truncated payload")
        c, u, count = struct.unpack_from("<BII", raw, off)
        off += 9
        if count != mined.shape[1]:
            raise FormatError(f"anchor {i}: expected {mined.shape[1]} positives, found {count}")
        end = off + 4 * count + 8
        if len(raw) < end:
            raise FormatError("truncated payload")
        mined[i] = np.frombuffer(raw, dtype="<u4", count=count, offset=off)
        off += 4 * count
        radius[i], tie[i] = struct.unpack_from("<fI", raw, off)
        off += 8
        cleaned[i], union[i] = bool(c), u
    if off != len(raw):
        raise FormatError("trailing bytes after payload")
    index = NeighborIndex(tau1, tau2, eta, mined, cleaned, union, radius, tie)
    if embeddings is not None:
        index.check_pairing(embeddings)
    return index


def index_file_size(n: int, tau1: int) -> int:
    return _HEADER.size + n * (1 + 4 + 4 + 4 * min(tau1, n) + 4 + 4)
