"""Minibatch training of the clustering head with Adam and a per-epoch
cosine learning-rate schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .embed_store import EmbeddingSet, SplitSpec
from .head import HeadParams, LossWeights, init_head, loss_and_grad, predict
from .neighbors import (Mode, NeighborIndex, SupervisionConfig, _LabeledPool,
                        sample_negatives, sample_positives)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k: int
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    n_pos: int = 1
    n_neg: int = 1
    head_kind: str = "mlp"
    hidden: int = 2048

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("n_pos and n_neg must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_pos: float
    loss_neg: float
    loss_ent: float
    total: float
    marginal_entropy: float
    metrics: dict | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        with_metrics = any(r.metrics for r in self.records)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "lr", "loss_pos", "loss_neg", "loss_ent", "total"]
        w.writerow(cols + (["acc", "nmi", "ari"] if with_metrics else []))
        for r in self.records:
            row = [r.epoch, repr(r.lr)] + [f"{v:.8f}" for v in
                                           (r.loss_pos, r.loss_neg, r.loss_ent, r.total)]
            if with_metrics:
                m = r.metrics or {}
                row += [f"{m[key]:.6f}" if key in m else "" for key in ("acc", "nmi", "ari")]
            w.writerow(row)
        return buf.getvalue()


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: HeadParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                    [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: HeadParams, grads: HeadParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    garrs = grads.arrays()
    if not all(np.isfinite(g).all() for g in garrs):
        raise TrainingDiverged("diverged")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params.arrays(), garrs, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    if not all(np.isfinite(p).all() for p in params.arrays()):
        raise TrainingDiverged("diverged")


def _epoch_metrics(params, es, split, mode):
    from .metrics import clustering_report, gcd_report

    pred = predict(params, es.data)
    k = params.k
    if mode is Mode.GCD and split is not None:
        return gcd_report(pred, es.labels, split, k).as_dict()
    return clustering_report(pred, es.labels, k).as_dict()


def train(es: EmbeddingSet, index: NeighborIndex, split: SplitSpec | None, cfg: TrainConfig,
          eval_each_epoch: bool = False) -> tuple[HeadParams, TrainHistory]:
    index.check_pairing(es)
    sup = cfg.supervision
    if sup.mode is Mode.GCD and split is None:
        raise ValueError("gcd mode requires a split")
    pool = None
    if sup.mode is Mode.GCD:
        pool = _LabeledPool(es.require_labels(), split)

    rng = np.random.default_rng(cfg.seed)
    params = init_head(cfg.head_kind, es.dim, cfg.k, cfg.hidden, seed=cfg.seed)
    state = AdamState.zeros_like(params)
    x = es.data.astype(np.float64)
    n = es.n
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        order = rng.permutation(n)
        sums = np.zeros(5)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            anchors = order[start:start + cfg.batch_size]
            rep_p = np.tile(anchors, cfg.n_pos)
            rep_n = np.tile(anchors, cfg.n_neg)
            pos = sample_positives(index, split, sup, rep_p, rng, labels=es.labels, _pool=pool)
            neg = sample_negatives(index, split, sup, rep_n, es, rng, _pool=pool)
            out = loss_and_grad(params, x[anchors], x[pos], x[neg], cfg.weights)
            if not math.isfinite(out.total):
                raise TrainingDiverged("diverged")
            adam_step(params, out.grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            sums += (out.pos, out.neg, out.ent, out.total, out.marginal_entropy)
            steps += 1
        means = sums / steps
        rec = EpochRecord(epoch, lr, *means.tolist())
        if eval_each_epoch and es.labels is not None:
            rec.metrics = _epoch_metrics(params, es, split, sup.mode)
        history.records.append(rec)
        log.debug("epoch %d lr=%.3g total=%.4f", epoch, lr, rec.total)
    return params, history


def argmax_concentration(params: HeadParams, es: EmbeddingSet) -> float:
    """Share of samples whose argmax is the most popular cluster."""
    pred = predict(params, es.data)
    return float(np.bincount(pred, minlength=params.k).max() / pred.size)
