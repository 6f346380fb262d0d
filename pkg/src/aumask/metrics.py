"""Masked multi-label metrics.

Positions whose ground truth is unknown are deleted per class before any
count is taken, so predictions there can never change a score.  Classes
with no annotated position are skipped and reported, never scored as 0.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import reduce

import numpy as np

from .labelstore import DISPLAYED, UNKNOWN, LabelMatrix, MergedDatabase, PredictionMatrix


class MetricError(ValueError):
    pass


def _codes(truth) -> np.ndarray:
    if isinstance(truth, LabelMatrix):
        return truth.values
    return np.asarray(truth, dtype=np.int8)


def _values(pred) -> np.ndarray:
    if isinstance(pred, PredictionMatrix):
        return pred.values
    return np.asarray(pred)


def _check_same_shape(truth: np.ndarray, pred: np.ndarray) -> None:
    if truth.shape != pred.shape:
        raise MetricError(f"shape mismatch: truth {truth.shape} vs prediction {pred.shape}")


def mask_class(truth_column, values_column) -> tuple[np.ndarray, np.ndarray]:
    """Drop every position whose truth is unknown, keeping order."""
    truth = _codes(truth_column).ravel()
    values = np.asarray(values_column).ravel()
    _check_same_shape(truth, values)
    keep = truth != UNKNOWN
    return truth[keep], values[keep]


def binarize(values, threshold: float = 0.5) -> np.ndarray:
    """1 where ``value >= threshold``, else 0."""
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(values, dtype=np.float64) >= threshold).astype(np.int8)


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class masked confusion counts; unknown truth adds to none of them."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def annotated(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def f1(self) -> list[float | None]:
        return [
            _f1_from_counts(int(tp), int(fp), int(fn)) if n else None
            for tp, fp, fn, n in zip(self.tp, self.fp, self.fn, self.annotated)
        ]

    def accuracy(self) -> list[float | None]:
        return [
            int(tp + tn) / int(n) if n else None
            for tp, tn, n in zip(self.tp, self.tn, self.annotated)
        ]


def confusion_counts(truth, pred) -> ConfusionCounts:
    """Masked confusion counts for a truth grid and a binary prediction grid."""
    t = _codes(truth)
    p = _values(pred)
    if t.ndim == 1:
        t = t[:, None]
    if p.ndim == 1:
        p = p[:, None]
    _check_same_shape(t, p)
    annotated = t != UNKNOWN
    pos_t = t == DISPLAYED
    pos_p = p == 1
    return ConfusionCounts(
        tp=(annotated & pos_t & pos_p).sum(axis=0),
        fp=(annotated & ~pos_t & pos_p).sum(axis=0),
        fn=(annotated & pos_t & ~pos_p).sum(axis=0),
        tn=(annotated & ~pos_t & ~pos_p).sum(axis=0),
    )


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    # 2PR/(P+R) written over counts; 0 when precision + recall = 0.
    denom = 2 * tp + fp + fn
    if tp == 0 or denom == 0:
        return 0.0
    return 2 * tp / denom


def class_f1(truth_column, pred_column) -> float | None:
    """F1 over annotated positions; ``None`` when there are none."""
    return confusion_counts(np.ravel(_codes(truth_column)), np.ravel(pred_column)).f1()[0]


def _weighted_mean(scores: Sequence[float], weights: Sequence[int]) -> float:
    # Integer weights are reduced by their gcd first, so equal weights take
    # exactly the same arithmetic path as the plain mean.
    g = reduce(math.gcd, weights)
    w = [x // g for x in weights]
    return math.fsum(wi * s for wi, s in zip(w, scores)) / math.fsum(w)


def mean_score(scores: Mapping[str, float | None] | Sequence[float | None]) -> float:
    """Unweighted mean over non-skipped (non-``None``) entries."""
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    kept = [s for s in values if s is not None]
    if not kept:
        raise MetricError("every class is skipped; nothing to average")
    return _weighted_mean(kept, [1] * len(kept))


def macro_f1(truth, pred) -> float:
    return mean_score(confusion_counts(truth, pred).f1())


def masked_accuracy(truth, pred) -> float:
    """Per-class accuracy over annotated positions, averaged over classes."""
    return mean_score(confusion_counts(truth, pred).accuracy())


@dataclass(frozen=True)
class OccurrenceWeights:
    """Displayed-label count per class in some reference split."""

    counts: Mapping[str, int]

    def __post_init__(self):
        counts = {str(k): int(v) for k, v in self.counts.items()}
        if any(v < 0 for v in counts.values()):
            raise MetricError("occurrence counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_database(cls, db: MergedDatabase) -> OccurrenceWeights:
        return cls(db.displayed_counts())


def weighted_macro_f1(
    per_class_f1: Mapping[str, float | None], weights: OccurrenceWeights | Mapping[str, int]
) -> float:
    """Occurrence-weighted mean of per-class F1: sum(n_c * F1_c) / sum(n_c)."""
    counts = weights.counts if isinstance(weights, OccurrenceWeights) else weights
    scores, ws = [], []
    for name, score in per_class_f1.items():
        if score is None:
            continue
        if name not in counts:
            raise MetricError(f"no occurrence weight for class {name!r}")
        scores.append(score)
        ws.append(int(counts[name]))
    if not scores:
        raise MetricError("every class is skipped; nothing to average")
    if sum(ws) <= 0:
        raise MetricError("occurrence weights sum to zero")
    return _weighted_mean(scores, ws)


def round_half_away(value: float, digits: int = 2) -> float:
    """Display rounding: half away from zero, on the decimal repr."""
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class MetricReport:
    class_names: tuple[str, ...]
    per_class_f1: dict[str, float | None]
    macro_f1: float
    accuracy: float | None
    weighted_macro_f1: dict[str, float] = field(default_factory=dict)
    skipped_classes: tuple[str, ...] = ()
    annotated_counts: dict[str, int] = field(default_factory=dict)

    @property
    def selection_score(self) -> float:
        return selection_score(self)

    def to_dict(self) -> dict:
        return {
            "per_class_f1": {c: self.per_class_f1[c] for c in self.class_names},
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "weighted_macro_f1": dict(sorted(self.weighted_macro_f1.items())),
            "skipped_classes": list(self.skipped_classes),
            "annotated_counts": {c: self.annotated_counts[c] for c in self.class_names if c in self.annotated_counts},
            "selection_score": self.selection_score if self.accuracy is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def format_table(self) -> str:
        def fmt(x):
            return "skipped" if x is None else f"{round_half_away(x):.2f}"

        width = max([len(c) for c in self.class_names] + [len("Weighted F1 macro"), 8])
        lines = [f"{'class':<{width}}  F1"]
        for c in self.class_names:
            lines.append(f"{c:<{width}}  {fmt(self.per_class_f1[c])}")
        lines.append(f"{'F1 macro':<{width}}  {fmt(self.macro_f1)}")
        for name, value in sorted(self.weighted_macro_f1.items()):
            label = "Weighted F1 macro"
            lines.append(f"{label:<{width}}  {fmt(value)}  ({name})")
        if self.accuracy is not None:
            lines.append(f"{'Accuracy':<{width}}  {fmt(self.accuracy)}")
            lines.append(f"{'Selection':<{width}}  {fmt(self.selection_score)}")
        if self.skipped_classes:
            lines.append("skipped: " + ", ".join(self.skipped_classes))
        return "\n".join(lines)


def selection_score(report: MetricReport) -> float:
    """Model selection score: mean of macro F1 and accuracy."""
    if report.accuracy is None:
        raise MetricError("selection score needs an accuracy")
    return (report.macro_f1 + report.accuracy) / 2


def evaluate(
    truth,
    pred,
    class_names: Sequence[str] | None = None,
    threshold: float = 0.5,
    weights: Mapping[str, OccurrenceWeights | Mapping[str, int]] | None = None,
) -> MetricReport:
    """Full metric suite for a truth grid and a probability grid."""
    if class_names is None:
        class_names = getattr(truth, "class_names", None) or getattr(pred, "class_names", None)
    t = _codes(truth)
    p = _values(pred)
    _check_same_shape(t, p)
    if class_names is None:
        class_names = [f"class_{i}" for i in range(t.shape[1])]
    class_names = tuple(class_names)
    counts = confusion_counts(t, binarize(p, threshold))
    return report_from_counts(counts, class_names, weights)


def report_from_counts(
    counts: ConfusionCounts,
    class_names: Sequence[str],
    weights: Mapping[str, OccurrenceWeights | Mapping[str, int]] | None = None,
) -> MetricReport:
    class_names = tuple(class_names)
    f1 = dict(zip(class_names, counts.f1()))
    acc = counts.accuracy()
    return MetricReport(
        class_names=class_names,
        per_class_f1=f1,
        macro_f1=mean_score(f1),
        accuracy=mean_score(acc),
        weighted_macro_f1={k: weighted_macro_f1(f1, w) for k, w in (weights or {}).items()},
        skipped_classes=tuple(c for c, s in f1.items() if s is None),
        annotated_counts={c: int(n) for c, n in zip(class_names, counts.annotated)},
    )


def report_from_scores(
    per_class_f1: Mapping[str, float | None],
    weights: Mapping[str, OccurrenceWeights | Mapping[str, int]] | None = None,
    accuracy: float | None = None,
) -> MetricReport:
    """Report built from already computed per-class F1 scores."""
    f1 = dict(per_class_f1)
    for c, s in f1.items():
        if s is not None and not 0.0 <= s <= 1.0:
            raise MetricError(f"F1 for {c!r} outside [0, 1]: {s}")
    return MetricReport(
        class_names=tuple(f1),
        per_class_f1=f1,
        macro_f1=mean_score(f1),
        accuracy=accuracy,
        weighted_macro_f1={k: weighted_macro_f1(f1, w) for k, w in (weights or {}).items()},
        skipped_classes=tuple(c for c, s in f1.items() if s is None),
    )
