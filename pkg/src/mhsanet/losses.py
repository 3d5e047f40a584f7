"""Training objectives for the global branch and the attention branch."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

LOSS_COLUMNS = ("ce_q", "ce_p", "ce_z", "triplet_p", "triplet_z", "fdrt", "ihtl", "acm")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-4  # feature diversity
    lambda2: float = 1.0  # improved hard triplet
    lambda3: float = 1e-3  # attention competition
    gamma: float = 1e-3
    margin: float = 3.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class BatchFeatures:
    """Everything the losses read for one batch.

    Branch fields are ``None`` when the branch (or the residual module) is
    disabled. ``classifiers`` maps a stream name (``q``, ``p``, ``z``) to a
    ``(weight, bias)`` pair.
    """

    labels: np.ndarray
    q_star: Tensor
    classifiers: dict[str, tuple[Tensor, Tensor]]
    p_star: Tensor | None = None
    z: Tensor | None = None
    P: Tensor | None = None
    alpha: Tensor | None = None
    extras: dict = field(default_factory=dict)


def _check_labels(labels: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-D integer array")
    if n_classes is not None and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label outside class range [0, {n_classes})")
    return labels


def ce_loss(features: Tensor, labels, classifier: tuple[Tensor, Tensor]) -> Tensor:
    """Mean negative log-softmax of the true class."""
    w, b = classifier
    labels = _check_labels(labels, w.shape[1])
    logits = T.add(T.matmul(features, w), b)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.scale(T.sum(T.mul(T.log_softmax(logits), onehot)), -1.0 / len(labels))


def _pk_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    labels = _check_labels(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    if not pos.any(axis=1).all():
        raise DataError("every identity in a triplet batch needs at least 2 samples")
    neg = ~same
    if not neg.any(axis=1).all():
        raise DataError("a triplet batch needs at least 2 identities")
    return pos, neg


def _hinge_mean(hard_pos: Tensor, hard_neg: Tensor, margin: float) -> Tensor:
    return T.mean(T.relu(T.add(T.sub(hard_pos, hard_neg), margin)))


def hard_triplet(features: Tensor, labels, margin: float) -> Tensor:
    """Batch-hard triplet loss on squared Euclidean distances."""
    pos, neg = _pk_masks(labels)
    d = T.pairwise_sq_dist(features, features)
    return _hinge_mean(T.masked_max(d, pos, axis=1), T.masked_min(d, neg, axis=1), margin)


def ihtl(P_batch: Tensor, labels, margin: float) -> Tensor:
    """Improved hard triplet loss over ``B x K x D`` head embeddings.

    For each image pair all K x K head distances are formed; positives use
    the largest, negatives the smallest, and then batch-hard mining picks
    the hardest image per anchor.
    """
    pos, neg = _pk_masks(labels)
    B, K, D = P_batch.shape
    rows = T.reshape(P_batch, (B * K, D))
    d = T.reshape(T.pairwise_sq_dist(rows, rows), (B, K, B, K))
    d = T.reshape(T.permute(d, (0, 2, 1, 3)), (B, B, K * K))
    every = np.ones(d.shape, dtype=bool)
    pair_far = T.masked_max(d, every, axis=2)
    pair_near = T.masked_min(d, every, axis=2)
    return _hinge_mean(T.masked_max(pair_far, pos, axis=1), T.masked_min(pair_near, neg, axis=1), margin)


def fdrt(P: Tensor) -> Tensor:
    """``||G - I||_F / K^2`` with ``G`` the Gram matrix of L2-normalized heads.

    Accepts ``K x D`` or ``B x K x D``; the batched form returns one value
    per image.
    """
    K = P.shape[-2]
    U = T.l2_normalize_rows(P)
    G = T.matmul(U, T.transpose(U))
    return T.scale(T.frobenius_norm(T.sub(G, np.eye(K))), 1.0 / K**2)


def acm_term(alpha: Tensor, gamma: float) -> Tensor:
    """Sum of ``min(alpha_ij, gamma)^2`` over the ``J x K`` map (per image if batched)."""
    if gamma <= 0:
        raise ConfigError("gamma must be > 0")
    return T.sum(T.square(T.minimum_const(alpha, gamma)), axis=(-2, -1))


def loss_terms(batch: BatchFeatures, w: LossWeights, train_gfb_ce: bool = True) -> dict[str, Tensor]:
    """Unweighted components keyed like the metrics CSV; absent terms are 0."""
    zero = Tensor(0.0)
    y = batch.labels
    terms = dict.fromkeys(LOSS_COLUMNS, zero)
    if train_gfb_ce:
        terms["ce_q"] = ce_loss(batch.q_star, y, batch.classifiers["q"])
    if batch.p_star is not None:
        terms["ce_p"] = ce_loss(batch.p_star, y, batch.classifiers["p"])
        terms["triplet_p"] = hard_triplet(batch.p_star, y, w.margin)
    if batch.z is not None:
        terms["ce_z"] = ce_loss(batch.z, y, batch.classifiers["z"])
        terms["triplet_z"] = hard_triplet(batch.z, y, w.margin)
    if batch.P is not None:
        if w.lambda1 > 0:
            terms["fdrt"] = T.mean(fdrt(batch.P))
        if w.lambda2 > 0:
            terms["ihtl"] = ihtl(batch.P, y, w.margin)
    if batch.alpha is not None and w.lambda3 > 0:
        terms["acm"] = T.mean(acm_term(batch.alpha, w.gamma))
    return terms


def _combine(terms: dict[str, Tensor], w: LossWeights, include_global: bool) -> Tensor:
    out = T.add(T.add(terms["ce_p"], terms["triplet_p"]), T.scale(terms["fdrt"], w.lambda1))
    out = T.add(out, T.add(terms["ce_z"], terms["triplet_z"]))
    out = T.add(out, T.scale(terms["ihtl"], w.lambda2))
    if include_global:
        out = T.add(out, T.add(terms["ce_q"], T.scale(terms["acm"], w.lambda3)))
    return out


def branch_loss(batch: BatchFeatures, w: LossWeights) -> Tensor:
    """Attention-branch objective: fusion CE+triplet, residual CE+triplet, weighted FDRT and IHTL."""
    return _combine(loss_terms(batch, w, train_gfb_ce=False), w, include_global=False)


def total_loss(batch: BatchFeatures, w: LossWeights, train_gfb_ce: bool = True) -> Tensor:
    """Branch objective plus the global CE (unless dropped) plus the weighted competition term."""
    return _combine(loss_terms(batch, w, train_gfb_ce), w, include_global=True)


def total_with_terms(batch: BatchFeatures, w: LossWeights, train_gfb_ce: bool = True) -> tuple[Tensor, dict[str, float]]:
    terms = loss_terms(batch, w, train_gfb_ce)
    total = _combine(terms, w, include_global=True)
    return total, {k: float(v.data) for k, v in terms.items()}
