"""Embedding datasets: the UNICEMB1 binary format, CSV import, synthetic
Gaussian mixtures and GCD labeled/unlabeled splits."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UNICEMB1"
_HEADER = struct.Struct("<8sIIB")
CSV_MAX_ROWS = 10_000


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """``n x dim`` float32 matrix with optional integer labels (-1 = unknown)."""

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"data must be a non-empty 2-D matrix, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("non-finite data")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if labels.shape != (data.shape[0],):
                raise ValueError(
                    f"labels length {labels.shape} does not match n={data.shape[0]}")
            if (labels < -1).any():
                raise ValueError("labels must be >= -1")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        if self.data.shape != other.data.shape:
            return False
        if self.data.tobytes() != other.data.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or bool(np.array_equal(self.labels, other.labels))

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("missing labels")
        return self.labels


@dataclass(frozen=True, eq=False)
class SplitSpec:
    """GCD split: which samples are labeled, and the Old/New class partition."""

    labeled_mask: np.ndarray
    old_classes: frozenset[int]
    new_classes: frozenset[int]

    def __post_init__(self):
        mask = np.asarray(self.labeled_mask, dtype=bool).copy()
        mask.setflags(write=False)
        object.__setattr__(self, "labeled_mask", mask)
        object.__setattr__(self, "old_classes", frozenset(int(c) for c in self.old_classes))
        object.__setattr__(self, "new_classes", frozenset(int(c) for c in self.new_classes))
        if self.old_classes & self.new_classes:
            raise ValueError("old and new classes overlap")

    @property
    def n(self) -> int:
        return self.labeled_mask.shape[0]

    def validate(self, labels: np.ndarray) -> None:
        if labels.shape[0] != self.n:
            raise ValueError(f"split covers {self.n} samples, labels have {labels.shape[0]}")
        lab = labels[self.labeled_mask]
        if (lab < 0).any():
            raise ValueError("labeled samples must have known labels")
        if not set(np.unique(lab).tolist()) <= self.old_classes:
            raise ValueError("labeled sample outside old classes")

    def __eq__(self, other):
        if not isinstance(other, SplitSpec):
            return NotImplemented
        return (np.array_equal(self.labeled_mask, other.labeled_mask)
                and self.old_classes == other.old_classes
                and self.new_classes == other.new_classes)


@dataclass(frozen=True)
class MixtureParams:
    k: int
    dim: int
    n: int
    separation: float = 6.0
    seed: int = 0
    labeled_fraction: float = 0.0
    old_class_fraction: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n < self.k:
            raise ValueError(f"n={self.n} < k={self.k}")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        for name in ("labeled_fraction", "old_class_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


# -- UNICEMB1 ---------------------------------------------------------------

def write_embeddings(es: EmbeddingSet, path) -> None:
    if not np.isfinite(es.data).all():
        raise ValueError("non-finite data")
    has_labels = es.labels is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, es.n, es.dim, int(has_labels)))
        fh.write(es.data.astype("<f4", copy=False).tobytes())
        if has_labels:
            fh.write(es.labels.astype("<i4", copy=False).tobytes())


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("truncated header")
    if raw[:8] != MAGIC:
        if raw[:7] == MAGIC[:7]:
            raise FormatError("unsupported format version")
        raise FormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    _, n, dim, flag = _HEADER.unpack_from(raw)
    if n < 1 or dim < 1:
        raise FormatError("bad dimensions")
    if flag not in (0, 1):
        raise FormatError("bad label flag")
    off = _HEADER.size
    payload = n * dim * 4
    if len(raw) < off + payload:
        raise FormatError("truncated payload")
    data = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += payload
    labels = None
    if flag:
        if len(raw) != off + 4 * n:
            raise FormatError("label block length mismatch")
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off)
    elif len(raw) != off:
        raise FormatError("trailing bytes after payload")
    return EmbeddingSet(data.astype(np.float32), None if labels is None else labels.astype(np.int32))


def read_csv_embeddings(path, with_labels: bool = False) -> EmbeddingSet:
    """One sample per row; with ``with_labels`` the last column is an integer label."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2, max_rows=CSV_MAX_ROWS + 1)
    if rows.shape[0] > CSV_MAX_ROWS - 1:
        raise ValueError(f"CSV import limited to fewer than {CSV_MAX_ROWS} rows")
    if with_labels:
        if rows.shape[1] < 2:
            raise ValueError("CSV needs at least one feature column plus the label column")
        lab = rows[:, -1]
        if not np.array_equal(lab, np.round(lab)):
            raise ValueError("label column must hold integers")
        return EmbeddingSet(rows[:, :-1], lab.astype(np.int32))
    return EmbeddingSet(rows)


# -- splits -----------------------------------------------------------------

def make_gcd_split(es: EmbeddingSet, old_class_fraction: float,
                   labeled_fraction: float, seed: int) -> SplitSpec:
    """Lowest ``ceil(old_class_fraction * K)`` class ids become Old; within every
    Old class ``floor(labeled_fraction * size)`` samples are labeled at random."""
    labels = es.require_labels()
    for v in (old_class_fraction, labeled_fraction):
        if not 0.0 <= v <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
    classes = np.unique(labels[labels >= 0])
    n_old = math.ceil(old_class_fraction * len(classes) - 1e-9)
    old = classes[:n_old]
    rng = np.random.default_rng(seed)
    mask = np.zeros(es.n, dtype=bool)
    for c in old:
        members = np.flatnonzero(labels == c)
        count = math.floor(labeled_fraction * members.size + 1e-9)
        if count:
            mask[rng.choice(members, size=count, replace=False)] = True
    return SplitSpec(mask, frozenset(old.tolist()), frozenset(classes[n_old:].tolist()))


def write_split(split: SplitSpec, path) -> None:
    doc = {
        "n": split.n,
        "labeled": np.flatnonzero(split.labeled_mask).tolist(),
        "old_classes": sorted(split.old_classes),
        "new_classes": sorted(split.new_classes),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def read_split(path) -> SplitSpec:
    doc = json.loads(Path(path).read_text())
    mask = np.zeros(int(doc["n"]), dtype=bool)
    mask[np.asarray(doc["labeled"], dtype=np.int64)] = True
    return SplitSpec(mask, frozenset(doc["old_classes"]), frozenset(doc["new_classes"]))


# -- synthetic data ---------------------------------------------------------

def mixture_means(k: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    means = rng.standard_normal((k, dim))
    if k == 1:
        return np.zeros((1, dim))
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    min_dist = dist[np.triu_indices(k, 1)].min()
    return means * (separation / min_dist)


def generate_gaussian_mixture(params: MixtureParams) -> tuple[EmbeddingSet, SplitSpec]:
    """Isotropic unit-variance blobs whose means sit at pairwise distance
    >= ``separation``; sample order is shuffled, class sizes differ by at most one."""
    rng = np.random.default_rng(params.seed)
    means = mixture_means(params.k, params.dim, params.separation, rng)
    sizes = np.full(params.k, params.n // params.k)
    sizes[: params.n % params.k] += 1
    labels = np.repeat(np.arange(params.k), sizes)
    labels = labels[rng.permutation(params.n)]
    data = means[labels] + rng.standard_normal((params.n, params.dim))
    es = EmbeddingSet(data.astype(np.float32), labels.astype(np.int32))
    split = make_gcd_split(es, params.old_class_fraction, params.labeled_fraction,
                           seed=params.seed + 1)
    return es, split
