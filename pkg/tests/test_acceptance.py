"""Exit criteria.  Each test appends one PASS/FAIL line to the terminal summary."""

import itertools
import time

import numpy as np
import pytest

from aumask import balance, labelstore, metrics, trainer
from aumask.labelstore import merge
from aumask.loss import EmptyBatchError, SoftF1Config, finite_difference_check, soft_f1_loss

from .conftest import disjoint_db
from .test_balance import brute_min_ratio, disjoint_positives, one_dataset, recount
from .test_cli import ab_files, outputs_of  # noqa: F401  (fixture)
from .test_metrics import (
    TABLE2_CLASSES,
    TABLE2_F1,
    TABLE2_TEST,
    TABLE2_TRAIN,
    brute_counts,
)

pytestmark = pytest.mark.acceptance
U = -1


def test_table2_reproduction(criterion):
    start = time.perf_counter()
    f1 = dict(zip(TABLE2_CLASSES, TABLE2_F1))
    report = metrics.report_from_scores(
        f1,
        weights={
            "test": metrics.OccurrenceWeights(dict(zip(TABLE2_CLASSES, TABLE2_TEST))),
            "train": metrics.OccurrenceWeights(dict(zip(TABLE2_CLASSES, TABLE2_TRAIN))),
        },
    )
    elapsed = time.perf_counter() - start
    criterion.update(macro=round(report.macro_f1, 4), test=round(report.weighted_macro_f1["test"], 4),
                     train=round(report.weighted_macro_f1["train"], 4), seconds=round(elapsed, 4))
    assert abs(report.macro_f1 - 0.58) <= 0.005
    assert abs(report.weighted_macro_f1["test"] - 0.65) <= 0.005
    assert abs(report.weighted_macro_f1["train"] - 0.61) <= 0.005
    assert metrics.round_half_away(report.macro_f1) == 0.58
    assert metrics.round_half_away(report.weighted_macro_f1["test"]) == 0.65
    assert metrics.round_half_away(report.weighted_macro_f1["train"]) == 0.61
    assert elapsed < 1.0


def test_gradient_correctness(criterion):
    rng = np.random.default_rng(20240)
    start = time.perf_counter()
    worst, batches = 0.0, 0
    while batches < 120:
        n, k = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        miss = rng.uniform(0.0, 0.9)
        y = (rng.random((n, k)) < 0.5).astype(np.int8)
        y[rng.random((n, k)) < miss] = U
        p = rng.random((n, k))
        try:
            err = finite_difference_check(p, y, SoftF1Config(), step=1e-6)
        except EmptyBatchError:
            continue
        worst = max(worst, err)
        batches += 1
    elapsed = time.perf_counter() - start
    criterion.update(batches=batches, max_rel_error=f"{worst:.2e}", seconds=round(elapsed, 2))
    assert worst < 1e-6
    assert elapsed < 30.0


def test_masking_invariance_suite(criterion):
    rng = np.random.default_rng(77)
    trials = 0
    while trials < 1000:
        n, k = int(rng.integers(1, 20)), int(rng.integers(1, 6))
        y = rng.choice(np.array([U, 0, 1], dtype=np.int8), size=(n, k), p=[0.4, 0.3, 0.3])
        if not (y == 1).any():
            continue
        p = rng.random((n, k))
        p2 = np.where(y == U, rng.random((n, k)), p)
        names = [f"c{j}" for j in range(k)]
        weights = {"w": {c: int(w) for c, w in zip(names, rng.integers(1, 100, k))}}

        a = soft_f1_loss(p, y)
        b = soft_f1_loss(p2, y)
        assert a.loss == b.loss
        assert np.array_equal(a.gradient, b.gradient)
        ra = metrics.evaluate(y, p, names, weights=weights)
        rb = metrics.evaluate(y, p2, names, weights=weights)
        assert ra.to_json() == rb.to_json()

        pad = int(rng.integers(1, 5))
        yp = np.vstack([y, np.full((pad, k), U, dtype=np.int8)])
        pp = np.vstack([p, rng.random((pad, k))])
        c = soft_f1_loss(pp, yp)
        assert c.loss == a.loss
        assert np.array_equal(c.gradient[:n], a.gradient) and not c.gradient[n:].any()
        rc = metrics.evaluate(yp, pp, names, weights=weights)
        assert (rc.per_class_f1, rc.macro_f1, rc.accuracy, rc.weighted_macro_f1) == (
            ra.per_class_f1, ra.macro_f1, ra.accuracy, ra.weighted_macro_f1)
        trials += 1
    criterion.update(trials=trials)


def test_discrete_consistency_exhaustive(criterion):
    exact = SoftF1Config(epsilon=0.0, skip_empty_classes=False)
    exact_skip = SoftF1Config(epsilon=0.0)
    cases = 0
    for n in range(1, 7):
        preds = [np.array(p) for p in itertools.product([0.0, 1.0], repeat=n)]
        for truth in itertools.product([U, 0, 1], repeat=n):
            y = np.array(truth, dtype=np.int8)[:, None]
            annotated = (y != U).any()
            for p in preds:
                pb = p.astype(np.int8)[:, None]
                counts = metrics.confusion_counts(y, pb)
                got = (int(counts.tp[0]), int(counts.fp[0]), int(counts.fn[0]), int(counts.tn[0]))
                assert got == brute_counts(truth, pb[:, 0])
                if not annotated:
                    continue
                hard = metrics.macro_f1(y, pb)
                res = soft_f1_loss(p[:, None], y, exact)
                assert res.soft_macro_f1 == hard
                assert res.loss == 1.0 - hard
                if (y == 1).any():
                    res = soft_f1_loss(p[:, None], y, exact_skip)
                    assert res.loss == 1.0 - hard
                cases += 1
    criterion.update(compared_cases=cases)


def test_merge_and_statistics(criterion):
    descs, tables = disjoint_db(value=1)
    db = merge(descs, tables)
    frac = labelstore.missing_fraction(db)
    assert frac == 0.5
    hist = labelstore.class_histogram(db)
    for j, name in enumerate(db.class_names):
        col = [row[j] for row in db.labels.values.tolist()]
        assert hist.as_dict()[name] == (col.count(1), col.count(0), col.count(-1))

    _, labels = trainer.synth_dataset(0, 25_000, 2, 4, 0.69, 0.02)
    empirical = float((labels.values == U).mean())
    criterion.update(missing_fraction=frac, synth_unknown=round(empirical, 4))
    assert labels.values.size == 100_000
    assert abs(empirical - 0.69) <= 0.01


def test_balancer_property(criterion):
    tiny = disjoint_positives(2, 4)
    plan = balance.greedy_balance(tiny, ["X", "Y"])
    optimum = brute_min_ratio(tiny, ["X", "Y"], 3)
    assert plan.ratio == optimum == 1.0
    assert plan.achieved_counts == recount(tiny, plan)

    plan20 = balance.greedy_balance(disjoint_positives(10, 20), ["X", "Y"])
    assert plan20.ratio == 1.0

    rng = np.random.default_rng(5)
    worst_gain = 0.0
    for _ in range(60):
        rows = []
        for _ in range(int(rng.integers(2, 12))):
            a = int(rng.random() < 0.5)
            rows.append({"A": a, "B": int(a or rng.random() < 0.5), "C": int(rng.random() < 0.3)})
        db = one_dataset(rows, classes=("A", "B", "C"))
        if min(db.displayed_counts().values()) == 0:
            continue
        before = balance.imbalance_ratio(db, ["A", "B", "C"])
        after = balance.greedy_balance(db, ["A", "B", "C"])
        assert after.ratio <= before
        assert after.achieved_counts == recount(db, after)
        worst_gain = max(worst_gain, after.ratio - before)
    criterion.update(tiny_ratio=plan.ratio, optimum=optimum, max_ratio_increase=worst_gain)


def test_end_to_end_learning_demo(criterion):
    x, labels = trainer.synth_dataset(0, 2000, 10, 4, 0.5, 0.02)
    config = trainer.TrainConfig(learning_rate=trainer.DEMO_LEARNING_RATE, seed=0)
    start = time.perf_counter()
    report = trainer.fit(trainer.ToyModel.zeros(10, labels.class_names), x, labels, config)
    elapsed = time.perf_counter() - start
    scores = [(e.validation.macro_f1 + e.validation.accuracy) / 2 for e in report.history]
    independent_best = int(np.argmax(scores)) + 1
    best_f1 = report.best.validation.macro_f1
    criterion.update(best_epoch=report.best_epoch, macro_f1=round(best_f1, 4), seconds=round(elapsed, 2))
    assert len(report.history) == 30
    assert best_f1 >= 0.95
    assert report.best_epoch == independent_best
    assert elapsed < 60.0


def test_cli_determinism(tmp_path, ab_files, capsys, criterion):  # noqa: F811
    first = outputs_of(tmp_path, ab_files, "first", capsys)
    second = outputs_of(tmp_path, ab_files, "second", capsys)
    criterion.update(subcommands=len(first))
    assert set(first) == {"merge", "stats", "filter", "balance", "evaluate", "train-demo", "grad-check"}
    for name in first:
        assert first[name][0] == 0, name
        assert first[name] == second[name], name
