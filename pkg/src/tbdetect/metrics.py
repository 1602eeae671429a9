"""Segmentation overlap scores and confusion-count classification rates."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_DOWN, Decimal

import numpy as np

from .imagecore import BinaryMask, DimensionError


def _bits(m) -> np.ndarray:
    return np.asarray(m.bits if isinstance(m, BinaryMask) else m).astype(bool)


def _overlap(pred, truth) -> tuple[int, int, int]:
    a, b = _bits(pred), _bits(truth)
    if a.shape != b.shape:
        raise DimensionError(f"mask dims differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def jaccard(pred, truth) -> float:
    """|A & B| / |A | B|; two empty masks agree perfectly (1.0)."""
    inter, na, nb = _overlap(pred, truth)
    union = na + nb - inter
    return 1.0 if union == 0 else inter / union


def dice(pred, truth) -> float:
    inter, na, nb = _overlap(pred, truth)
    return 1.0 if na + nb == 0 else 2 * inter / (na + nb)


@dataclass(frozen=True)
class SegScore:
    jaccard: float
    dice: float


def seg_score(pred, truth) -> SegScore:
    return SegScore(jaccard(pred, truth), dice(pred, truth))


def aggregate_seg(pairs, mode: str = "mean") -> SegScore:
    """Dataset-level score over (pred, truth) pairs.

    ``mean`` averages per-image scores; ``pooled`` sums pixel counts first.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no mask pairs to aggregate")
    if mode == "mean":
        scores = [seg_score(p, t) for p, t in pairs]
        return SegScore(float(np.mean([s.jaccard for s in scores])),
                        float(np.mean([s.dice for s in scores])))
    if mode == "pooled":
        inter = na = nb = 0
        for p, t in pairs:
            i, a, b = _overlap(p, t)
            inter, na, nb = inter + i, na + a, nb + b
        union = na + nb - inter
        return SegScore(1.0 if union == 0 else inter / union,
                        1.0 if na + nb == 0 else 2 * inter / (na + nb))
    raise ValueError(f"unknown aggregation mode {mode!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def from_labels(cls, predicted, actual, positive=1) -> "ConfusionCounts":
        p = np.asarray(predicted) == positive
        a = np.asarray(actual) == positive
        return cls(int(np.sum(p & a)), int(np.sum(~p & ~a)), int(np.sum(p & ~a)), int(np.sum(~p & a)))


@dataclass(frozen=True)
class ClassificationScores:
    """Rates are ``None`` when their denominator is zero."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None


def _ratio(num, den):
    return None if den == 0 else num / den


def f1_from(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def classification_scores(counts: ConfusionCounts) -> ClassificationScores:
    c = counts
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return ClassificationScores(_ratio(c.tp + c.tn, c.total), precision, recall,
                                f1_from(precision, recall))


def truncate(value: float, places: int = 4) -> float:
    """Drop digits past ``places`` decimals (the published tables truncate, not round)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_DOWN))


def fmt(value: float | None, places: int = 4) -> str:
    if value is None:
        return "n/a"
    return f"{truncate(value, places):.{places}f}"
