"""Soft F1-macro loss over masked labels.

For class ``c`` with annotated rows ``M``::

    T = sum_M p * y        S = sum_M p + sum_M y
    softF1_c = 2 T / (S + eps)
    L = 1 - mean_c softF1_c

At binary ``p`` and ``eps = 0`` this is exactly the hard F1
``2 tp / (2 tp + fp + fn)``.  Rows with unknown truth are excluded from every
sum, so the gradient there is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .labelstore import DISPLAYED, UNKNOWN, LabelMatrix, PredictionMatrix


class EmptyBatchError(ValueError):
    """Every class in the batch was skipped."""


@dataclass(frozen=True)
class SoftF1Config:
    epsilon: float = 1e-7
    skip_empty_classes: bool = True

    def __post_init__(self):
        # eps = 0 is allowed so the exact identity with hard F1 can be checked.
        if not self.epsilon >= 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


@dataclass(frozen=True)
class LossResult:
    loss: float
    gradient: np.ndarray
    per_class_soft_f1: dict[str, float | None]
    batch_skipped_classes: tuple[str, ...]
    annotated_counts: dict[str, int] = field(default_factory=dict)

    @property
    def soft_macro_f1(self) -> float:
        kept = [v for v in self.per_class_soft_f1.values() if v is not None]
        return math.fsum(kept) / len(kept)


def _arrays(pred, truth) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    names = getattr(truth, "class_names", None) or getattr(pred, "class_names", None)
    p = pred.values if isinstance(pred, PredictionMatrix) else np.asarray(pred, dtype=np.float64)
    y = truth.values if isinstance(truth, LabelMatrix) else np.asarray(truth, dtype=np.int8)
    if p.ndim == 1:
        p = p[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {y.shape}")
    if not (np.all(p >= 0.0) and np.all(p <= 1.0)):
        raise ValueError("predictions must lie in [0, 1]")
    if names is None:
        names = tuple(f"class_{i}" for i in range(p.shape[1]))
    return p.astype(np.float64, copy=False), y, tuple(names)


def _class_terms(p: np.ndarray, y: np.ndarray, eps: float, skip_empty: bool):
    """Soft F1 and its gradient for one column; ``None`` when skipped."""
    mask = y != UNKNOWN
    if not mask.any():
        return None
    pm = p[mask]
    ym = (y[mask] == DISPLAYED).astype(np.float64)
    if skip_empty and not ym.any():
        return None
    t = math.fsum(pm * ym)
    s = math.fsum(pm) + math.fsum(ym)
    d = s + eps
    grad = np.zeros_like(p)
    if d == 0.0:
        # eps = 0 with nothing predicted and nothing displayed: 0/0 -> 0,
        # the eps -> 0 limit of both the value and the gradient.
        return 0.0, grad
    grad[mask] = 2.0 * (ym * d - t) / (d * d)
    return 2.0 * t / d, grad


def soft_class_f1(pred_column, truth_column, config: SoftF1Config | None = None) -> float | None:
    config = config or SoftF1Config()
    p, y, _ = _arrays(np.ravel(pred_column), np.ravel(truth_column))
    terms = _class_terms(p[:, 0], y[:, 0], config.epsilon, config.skip_empty_classes)
    return None if terms is None else terms[0]


def soft_f1_loss(pred, truth, config: SoftF1Config | None = None) -> LossResult:
    """Loss ``1 - mean soft F1`` over non-skipped classes, with its gradient
    with respect to the probabilities."""
    config = config or SoftF1Config()
    p, y, names = _arrays(pred, truth)
    per_class: dict[str, float | None] = {}
    grads = []
    for j, name in enumerate(names):
        terms = _class_terms(p[:, j], y[:, j], config.epsilon, config.skip_empty_classes)
        if terms is None:
            per_class[name] = None
            grads.append(None)
        else:
            per_class[name] = terms[0]
            grads.append(terms[1])
    kept = [v for v in per_class.values() if v is not None]
    if not kept:
        raise EmptyBatchError("every class is skipped in this batch")
    k = len(kept)
    gradient = np.zeros_like(p)
    for j, g in enumerate(grads):
        if g is not None:
            gradient[:, j] = -g / k
    return LossResult(
        loss=1.0 - math.fsum(kept) / k,
        gradient=gradient,
        per_class_soft_f1=per_class,
        batch_skipped_classes=tuple(n for n, v in per_class.items() if v is None),
        annotated_counts={n: int(c) for n, c in zip(names, (y != UNKNOWN).sum(axis=0))},
    )


def _exact_class_sums(p: np.ndarray, y: np.ndarray, eps: Fraction, skip_empty: bool):
    """Exact (T, S, softF1) per class, ``None`` for skipped classes."""
    out = []
    for j in range(p.shape[1]):
        rows = [i for i in range(p.shape[0]) if y[i, j] != UNKNOWN]
        ys = [1 if y[i, j] == DISPLAYED else 0 for i in rows]
        if not rows or (skip_empty and not any(ys)):
            out.append(None)
            continue
        ps = [Fraction(float(p[i, j])) for i in rows]
        t = sum((pi for pi, yi in zip(ps, ys) if yi), Fraction(0))
        s = sum(ps, Fraction(0)) + sum(ys)
        out.append((t, s, _exact_soft_f1(t, s, eps)))
    return out


def _exact_soft_f1(t: Fraction, s: Fraction, eps: Fraction) -> Fraction:
    d = s + eps
    return Fraction(0) if d == 0 else 2 * t / d


def finite_difference_check(
    pred, truth, config: SoftF1Config | None = None, step: float = 1e-6, exact: bool = True
) -> float:
    """Largest relative gap between the analytic gradient and central
    differences of the loss, over annotated positions at least ``step`` away
    from 0 and 1.

    With ``exact`` the perturbed losses are evaluated in rational arithmetic,
    leaving only the O(step**2) truncation error; otherwise they come from
    :func:`soft_f1_loss` in float64, whose rounding near ``L ~ 0.5`` is about
    1e-16 / step in absolute terms.

    Unknown positions must carry an exactly zero gradient; if one does not,
    the result is ``inf``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    config = config or SoftF1Config()
    p, y, _ = _arrays(pred, truth)
    analytic = soft_f1_loss(p, y, config).gradient
    if np.any(analytic[y == UNKNOWN] != 0.0):
        return math.inf

    if exact:
        eps = Fraction(config.epsilon)
        h = Fraction(step)
        sums = _exact_class_sums(p, y, eps, config.skip_empty_classes)
        k = sum(1 for c in sums if c is not None)
        total = sum((c[2] for c in sums if c is not None), Fraction(0))

        def numeric_at(i, j):
            if sums[j] is None:
                return 0.0
            t, s, f = sums[j]
            dt = h if y[i, j] == DISPLAYED else 0
            up = 1 - (total - f + _exact_soft_f1(t + dt, s + h, eps)) / k
            down = 1 - (total - f + _exact_soft_f1(t - dt, s - h, eps)) / k
            return float((up - down) / (2 * h))

    else:
        work = p.copy()

        def numeric_at(i, j):
            orig = work[i, j]
            hi, lo = orig + step, orig - step
            work[i, j] = hi
            up = soft_f1_loss(work, y, config).loss
            work[i, j] = lo
            down = soft_f1_loss(work, y, config).loss
            work[i, j] = orig
            # hi - lo is the step actually taken after rounding
            return (up - down) / (hi - lo)

    worst = 0.0
    for i, j in zip(*np.nonzero(y != UNKNOWN)):
        if p[i, j] - step < 0.0 or p[i, j] + step > 1.0:
            continue
        numeric = numeric_at(i, j)
        a = analytic[i, j]
        scale = max(abs(a), abs(numeric))
        if scale == 0.0:
            continue
        worst = max(worst, abs(a - numeric) / scale)
    return worst
