"""Clustering head: forward pass, the positive/negative/entropy losses and
their exact gradients.

The head maps an embedding to a K-way softmax, through either one hidden
ReLU layer (``mlp``) or a single affine map (``linear``). Anchors,
positives and negatives share the parameters, so gradients flow back
through all three roles.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed_store import FormatError

EPS = 1e-7
MAGIC = b"UNICHEAD"
_HEADER = struct.Struct("<8sBIII")
KINDS = ("mlp", "linear")


@dataclass
class HeadParams:
    kind: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1] if self.kind == "mlp" else 0

    @property
    def k(self) -> int:
        return (self.W2 if self.kind == "mlp" else self.W1).shape[1]

    def names(self) -> tuple[str, ...]:
        return ("W1", "b1", "W2", "b2") if self.kind == "mlp" else ("W1", "b1")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.names()]

    def copy(self) -> "HeadParams":
        return HeadParams(self.kind, *(a.copy() for a in self.arrays()))

    def __eq__(self, other):
        if not isinstance(other, HeadParams):
            return NotImplemented
        return self.kind == other.kind and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 1.0
    lambda_neg: float = 1.0
    lambda_ent: float = 3.0

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_neg, self.lambda_ent) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BatchGradients:
    grads: HeadParams
    pos: float
    neg: float
    ent: float
    total: float
    marginal_entropy: float


def init_head(kind: str, dim: int, k: int, hidden: int = 2048, seed: int = 0) -> HeadParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if dim < 1 or k < 1 or (kind == "mlp" and hidden < 1):
        raise ValueError("dim, k and hidden must be positive")
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    if kind == "linear":
        return HeadParams("linear", *layer(dim, k))
    W1, b1 = layer(dim, hidden)
    W2, b2 = layer(hidden, k)
    return HeadParams("mlp", W1, b1, W2, b2)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params: HeadParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"batch shape {x.shape} does not match head dim {params.dim}")
    if params.kind == "linear":
        return _softmax(x @ params.W1 + params.b1), (x, None)
    pre = x @ params.W1 + params.b1
    h = np.maximum(pre, 0.0)
    return _softmax(h @ params.W2 + params.b2), (x, h)


def forward(params: HeadParams, batch: np.ndarray) -> np.ndarray:
    return _forward(params, batch)[0]


def predict(params: HeadParams, batch: np.ndarray) -> np.ndarray:
    return forward(params, batch).argmax(axis=1)


def _backward(params: HeadParams, probs, cache, dprobs, acc: list[np.ndarray]) -> None:
    """Accumulate parameter gradients given dLoss/dprobs."""
    x, h = cache
    dz = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    if params.kind == "linear":
        acc[0] += x.T @ dz
        acc[1] += dz.sum(axis=0)
        return
    acc[2] += h.T @ dz
    acc[3] += dz.sum(axis=0)
    dh = (dz @ params.W2.T) * (h > 0)
    acc[0] += x.T @ dh
    acc[1] += dh.sum(axis=0)


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _bce_one(s):
    """Loss and d/ds of -log(clamp(s))."""
    c = np.clip(s, EPS, 1.0 - EPS)
    inside = (s > EPS) & (s < 1.0 - EPS)
    return -np.log(c), np.where(inside, -1.0 / c, 0.0)


def _bce_zero(s):
    """Loss and d/ds of -log(clamp(1 - s))."""
    t = 1.0 - s
    c = np.clip(t, EPS, 1.0 - EPS)
    inside = (t > EPS) & (t < 1.0 - EPS)
    return -np.log(c), np.where(inside, 1.0 / c, 0.0)


def loss_pos(y_i, y_p) -> float:
    return float(_bce_one(float(np.dot(y_i, y_p)))[0])


def loss_neg(y_i, y_n) -> float:
    return float(_bce_zero(float(np.dot(y_i, y_n)))[0])


def _entropy_terms(probs: np.ndarray):
    k = probs.shape[1]
    mean = probs.mean(axis=0)
    safe = np.where(mean > 0, mean, 1.0)
    plogp = mean * np.log(safe)
    h = -plogp.sum()
    # d(log K - H)/d mean = log(mean) + 1
    grad = np.log(np.maximum(mean, np.finfo(float).tiny)) + 1.0
    return math.log(k) - h, h, grad


def loss_ent(anchor_probs: np.ndarray) -> float:
    """``log K - H(mean row)``: zero iff the batch marginal is uniform."""
    probs = np.atleast_2d(np.asarray(anchor_probs, dtype=np.float64))
    return float(max(_entropy_terms(probs)[0], 0.0))


def loss_and_grad(params: HeadParams, anchors, positives, negatives,
                  weights: LossWeights) -> BatchGradients:
    """Weighted loss over a batch and its gradient for every head parameter.

    ``positives``/``negatives`` may hold several draws per anchor, stacked
    as consecutive copies of the anchor batch (row r pairs with anchor r % m).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    m = anchors.shape[0]
    rows_p, rows_n = np.shape(positives)[0], np.shape(negatives)[0]
    if rows_p % m or rows_n % m:
        raise ValueError("positive/negative rows must be a multiple of the anchor rows")
    # one pass over the stacked roles; they share every parameter
    probs, cache = _forward(params, np.concatenate([anchors, positives, negatives]))
    p_a, p_p, p_n = np.split(probs, [m, m + rows_p])
    rp, rn = rows_p // m, rows_n // m
    a_p, a_n = np.tile(p_a, (rp, 1)), np.tile(p_a, (rn, 1))

    lp, dlp = _bce_one(_dot(a_p, p_p))
    ln, dln = _bce_zero(_dot(a_n, p_n))
    le, h, dle = _entropy_terms(p_a)
    pos, neg, ent = float(lp.mean()), float(ln.mean()), float(le)
    total = weights.lambda_pos * pos + weights.lambda_neg * neg + weights.lambda_ent * ent

    gp = (weights.lambda_pos / lp.size) * dlp[:, None]
    gn = (weights.lambda_neg / ln.size) * dln[:, None]
    d_anchor = (gp * p_p).reshape(rp, m, -1).sum(axis=0)
    d_anchor += (gn * p_n).reshape(rn, m, -1).sum(axis=0)
    d_anchor += (weights.lambda_ent / m) * dle[None, :]

    acc = [np.zeros_like(a) for a in params.arrays()]
    dprobs = np.concatenate([d_anchor, gp * a_p, gn * a_n])
    _backward(params, probs, cache, dprobs, acc)
    return BatchGradients(HeadParams(params.kind, *acc), pos, neg, ent, total, float(h))


# -- UNICHEAD ---------------------------------------------------------------

def write_head(params: HeadParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, KINDS.index(params.kind), params.dim,
                              params.hidden, params.k))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_head(path) -> HeadParams:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    _, kind_id, dim, hidden, k = _HEADER.unpack_from(raw)
    if kind_id >= len(KINDS):
        raise FormatError("unknown head kind")
    kind = KINDS[kind_id]
    shapes = [(dim, hidden), (hidden,), (hidden, k), (k,)] if kind == "mlp" else [(dim, k), (k,)]
    expected = _HEADER.size + 4 * sum(math.prod(s) for s in shapes)
    if len(raw) != expected:
        raise FormatError("truncated payload" if len(raw) < expected else "trailing bytes")
    off, arrays = _HEADER.size, []
    for shape in shapes:
        count = math.prod(shape)
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 4 * count
    return HeadParams(kind, *arrays)
