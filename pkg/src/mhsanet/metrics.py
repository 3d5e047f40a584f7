"""Retrieval evaluation: squared-distance ranking, CMC and mAP."""
from __future__ import annotations

import io
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, EvaluationError


@dataclass
class EmbeddingRecord:
    id: int
    cam: int
    feature: np.ndarray


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    ap: list[float]
    n_valid: int
    n_invalid: int
    variant: str = "full"
    fusion: str = "saffm"
    notes: list[str] = field(default_factory=list)

    def rank(self, r: int) -> float:
        """Rank-r accuracy (1-based); saturates past the gallery length."""
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("rank,accuracy\n")
        for r, acc in enumerate(self.cmc, start=1):
            buf.write(f"{r},{float(acc)!r}\n")
        buf.write(f"mAP,{float(self.mAP)!r}\n")
        return buf.getvalue()

    def summary(self) -> str:
        return (f"variant={self.variant} fusion={self.fusion} queries={self.n_valid} (invalid {self.n_invalid})\n"
                f"Rank-1 {100 * self.rank(1):.1f}%  Rank-5 {100 * self.rank(5):.1f}%  "
                f"Rank-10 {100 * self.rank(10):.1f}%  mAP {100 * self.mAP:.1f}%")


def rank_gallery(query: EmbeddingRecord, gallery: Sequence[EmbeddingRecord]) -> np.ndarray:
    """Gallery indices by ascending squared distance, ties by index.

    Entries sharing both identity and camera with the query are dropped
    before ranking.
    """
    keep = [i for i, g in enumerate(gallery) if not (g.id == query.id and g.cam == query.cam)]
    if not keep:
        return np.zeros(0, dtype=np.int64)
    feats = np.stack([np.asarray(gallery[i].feature, dtype=np.float64) for i in keep])
    q = np.asarray(query.feature, dtype=np.float64)
    if feats.shape[1] != q.shape[0]:
        raise DimensionError(f"query feature length {q.shape[0]} vs gallery {feats.shape[1]}")
    diff = feats - q
    d = (diff * diff).sum(axis=1)
    return np.asarray(keep, dtype=np.int64)[np.argsort(d, kind="stable")]


def average_precision(hits: np.ndarray) -> float:
    """Mean over relevant positions k of precision@k, for a boolean ranked hit list.

    Accumulated in exact rationals, so e.g. hits at ranks 1 and 3 give the
    float nearest to 5/6.
    """
    pos = np.flatnonzero(hits)
    if len(pos) == 0:
        return 0.0
    return float(sum(Fraction(n, int(p) + 1) for n, p in enumerate(pos, start=1)) / len(pos))


def cmc_map(queries: Sequence[EmbeddingRecord], gallery: Sequence[EmbeddingRecord], variant: str = "full",
            fusion: str = "saffm") -> EvalReport:
    """CMC curve and mAP over all valid queries.

    A query is invalid when filtering leaves no gallery entry or no entry of
    its identity; invalid queries are counted but excluded from averages.
    """
    n_gallery = len(gallery)
    if n_gallery == 0:
        raise EvaluationError("empty gallery")
    cmc = np.zeros(n_gallery)
    aps: list[float] = []
    invalid = 0
    for q in queries:
        order = rank_gallery(q, gallery)
        hits = np.array([gallery[i].id == q.id for i in order], dtype=bool)
        if not hits.any():
            invalid += 1
            continue
        first = int(np.argmax(hits))
        cmc[first:] += 1.0
        aps.append(average_precision(hits))
    if not aps:
        raise EvaluationError("no valid queries")
    return EvalReport(cmc / len(aps), float(np.mean(aps)), aps, len(aps), invalid, variant, fusion)


def records(features: np.ndarray, ids, cams) -> list[EmbeddingRecord]:
    return [EmbeddingRecord(int(i), int(c), f) for f, i, c in zip(features, ids, cams)]
