"""Class selection by occurrence count and multi-label oversampling.

An occurrence is a displayed label; not-displayed and unknown cells never
count.  Balancing assigns each record an integer repetition weight and only
ever adds copies of real records.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .labelstore import DISPLAYED, UNKNOWN, MergedDatabase

PLAN_FORMAT = "aumask-balance-plan"
PLAN_VERSION = 1


class BalanceError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    min_occurrences: int = 20000

    def __post_init__(self):
        if self.min_occurrences < 0:
            raise ValueError("min_occurrences must be >= 0")


@dataclass(frozen=True)
class BalancePlan:
    sample_ids: tuple[str, ...]
    weights: tuple[int, ...]
    selected_classes: tuple[str, ...]
    achieved_counts: dict[str, int]
    iterations: int = 0

    @property
    def ratio(self) -> float:
        return imbalance_ratio(self.achieved_counts, self.selected_classes)

    def weight_map(self) -> dict[str, int]:
        return dict(zip(self.sample_ids, self.weights))

    def dumps(self) -> str:
        header = {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "selected_classes": list(self.selected_classes),
            "achieved_counts": {c: self.achieved_counts[c] for c in self.selected_classes},
            "ratio": self.ratio,
            "iterations": self.iterations,
        }
        lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
        for sid, w in zip(self.sample_ids, self.weights):
            lines.append(json.dumps({"sample_id": sid, "weight": w}, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> BalancePlan:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise BalanceError("empty plan file")
        header = json.loads(lines[0])
        if header.get("format") != PLAN_FORMAT:
            raise BalanceError("not a balance plan file")
        recs = [json.loads(ln) for ln in lines[1:]]
        return cls(
            sample_ids=tuple(r["sample_id"] for r in recs),
            weights=tuple(int(r["weight"]) for r in recs),
            selected_classes=tuple(header["selected_classes"]),
            achieved_counts={k: int(v) for k, v in header["achieved_counts"].items()},
            iterations=int(header.get("iterations", 0)),
        )


def occurrence_filter(db: MergedDatabase, config: SelectionConfig | None = None) -> list[str]:
    """Classes with at least ``min_occurrences`` displayed labels, in class-axis order."""
    config = config or SelectionConfig()
    counts = db.displayed_counts()
    return [c for c in db.class_names if counts[c] >= config.min_occurrences]


def drop_all_unknown(db: MergedDatabase, selected: Sequence[str]) -> MergedDatabase:
    """Remove records whose labels on ``selected`` are all unknown."""
    idx = db.class_indices(selected)
    keep = np.nonzero((db.labels.values[:, idx] != UNKNOWN).any(axis=1))[0]
    return db.take(keep)


def imbalance_ratio(source, classes: Sequence[str] | None = None) -> float:
    """Max over min displayed count across ``classes``.

    ``source`` is a database, a plan, or a mapping of class to count.
    """
    if isinstance(source, MergedDatabase):
        counts = source.displayed_counts()
    elif isinstance(source, BalancePlan):
        counts = source.achieved_counts
        classes = classes if classes is not None else source.selected_classes
    else:
        counts = dict(source)
    classes = list(classes if classes is not None else counts)
    if not classes:
        raise BalanceError("imbalance ratio needs at least one class")
    values = [counts[c] for c in classes]
    if min(values) <= 0:
        zero = [c for c, v in zip(classes, values) if v <= 0]
        raise BalanceError(f"classes with no displayed labels: {zero}")
    return max(values) / min(values)


def _key(counts: np.ndarray, targets: np.ndarray, explicit: bool) -> tuple:
    # Lexicographic objective: normalized max/min ratio, then how many
    # classes sit at the minimum (breaks plateaus with several scarce
    # classes).  Explicit targets put the summed shortfall first.
    norm = [Fraction(int(c), int(t)) for c, t in zip(counts, targets)]
    lo = min(norm)
    key = (max(norm) / lo, sum(1 for v in norm if v == lo))
    if explicit:
        return (sum(max(Fraction(0), 1 - v) for v in norm),) + key
    return key


def greedy_balance(
    db: MergedDatabase,
    selected: Sequence[str],
    target: str | int | Mapping[str, int] = "min-max",
    max_iterations: int | None = None,
) -> BalancePlan:
    """Oversample records until displayed counts of ``selected`` are balanced.

    Starts from weight 1 for every record and repeatedly adds one copy of a
    record.  Records are grouped by their displayed pattern on ``selected``;
    each step evaluates adding one copy of each pattern that is displayed in
    a currently scarcest class and takes the one with the smallest resulting
    (ratio, classes-at-minimum) key.  Ties go to the pattern whose first
    record comes first by sample_id; within a pattern the least-repeated
    record (then the smallest sample_id) receives the copy.  Stops when no
    candidate improves the key, when every class meets an explicit target,
    or after ``max_iterations`` (default ``10 * len(db)``) steps.

    ``target`` is ``"min-max"`` (equalize counts), one count for every class,
    or a per-class mapping of target counts; counts are compared after
    dividing by their targets.
    """
    selected = list(selected)
    if not selected:
        raise BalanceError("no classes selected")
    idx = db.class_indices(selected)
    displayed = (db.labels.values[:, idx] == DISPLAYED).astype(np.int64)
    counts = displayed.sum(axis=0)
    if (counts == 0).any():
        zero = [c for c, n in zip(selected, counts) if n == 0]
        raise BalanceError(f"cannot balance classes with no displayed records: {zero}")

    if target == "min-max":
        targets = np.ones(len(selected), dtype=np.int64)
        explicit = False
    elif isinstance(target, Mapping):
        targets = np.array([int(target[c]) for c in selected], dtype=np.int64)
        explicit = True
    else:
        targets = np.full(len(selected), int(target), dtype=np.int64)
        explicit = True
    if (targets <= 0).any():
        raise BalanceError("targets must be positive")

    n = len(db)
    cap = 10 * n if max_iterations is None else max_iterations
    weights = np.ones(n, dtype=np.int64)

    order = sorted(range(n), key=lambda i: db.sample_ids[i])
    groups: dict[bytes, list[int]] = {}
    for i in order:
        if displayed[i].any():
            groups.setdefault(displayed[i].tobytes(), []).append(i)
    # pattern list in sample_id order of each group's first record
    patterns = [(displayed[members[0]], members) for members in groups.values()]

    iterations = 0
    key = _key(counts, targets, explicit)
    while iterations < cap:
        if explicit and all(c >= t for c, t in zip(counts, targets)):
            break
        norm = [Fraction(int(c), int(t)) for c, t in zip(counts, targets)]
        lo = min(norm)
        scarce = np.array([v == lo for v in norm])
        best = None
        for pattern, members in patterns:
            if not (pattern.astype(bool) & scarce).any():
                continue
            cand = _key(counts + pattern, targets, explicit)
            if best is None or cand < best[0]:
                best = (cand, pattern, members)
        if best is None or not best[0] < key:
            break
        key, pattern, members = best
        pick = min(members, key=lambda i: (weights[i], db.sample_ids[i]))
        weights[pick] += 1
        counts = counts + pattern
        iterations += 1

    achieved = (weights[:, None] * displayed).sum(axis=0)
    return BalancePlan(
        sample_ids=db.sample_ids,
        weights=tuple(int(w) for w in weights),
        selected_classes=tuple(selected),
        achieved_counts={c: int(v) for c, v in zip(selected, achieved)},
        iterations=iterations,
    )


def expanded_rows(db: MergedDatabase, plan: BalancePlan) -> np.ndarray:
    """Row indices of ``db`` repeated according to the plan's weights."""
    weights = plan.weight_map()
    missing = set(db.sample_ids) - set(weights)
    if missing:
        raise BalanceError(f"plan has no weight for {sorted(missing)[:3]}")
    reps = np.array([weights[s] for s in db.sample_ids], dtype=np.int64)
    return np.repeat(np.arange(len(db)), reps)
