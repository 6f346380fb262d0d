import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aumask import metrics as m

from .conftest import random_pair

U = -1

# Table 2: per-class F1 and displayed counts for training and testing.
TABLE2_CLASSES = ["AU01", "AU02", "AU04", "AU06", "AU07", "AU10", "AU12",
                  "AU14", "AU15", "AU17", "AU23", "AU24", "AU25"]
TABLE2_F1 = [0.69, 0.42, 0.59, 0.63, 0.73, 0.80, 0.77, 0.62, 0.33, 0.53, 0.35, 0.54, 0.59]
TABLE2_TRAIN = [107007, 78461, 94986, 95539, 107283, 121313, 129915,
                94422, 83580, 98892, 65769, 94006, 71048]
TABLE2_TEST = [20944, 5528, 14150, 21212, 20124, 22056, 22550,
               15010, 6099, 11388, 5970, 7781, 5727]


def brute_counts(truth, pred):
    """Per-position recount, one class column at a time."""
    tp = fp = fn = tn = 0
    for t, p in zip(truth, pred):
        if t == U:
            continue
        if t == 1 and p == 1:
            tp += 1
        elif t == 0 and p == 1:
            fp += 1
        elif t == 1 and p == 0:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_f1(truth, pred):
    tp, fp, fn, tn = brute_counts(truth, pred)
    if tp + fp + fn + tn == 0:
        return None
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def brute_accuracy(truth, pred):
    tp, fp, fn, tn = brute_counts(truth, pred)
    n = tp + fp + fn + tn
    return None if n == 0 else (tp + tn) / n


def test_mask_class():
    t, v = m.mask_class([1, 0, U, 1], [0.9, 0.8, 0.2, 0.1])
    assert t.tolist() == [1, 0, 1]
    assert v.tolist() == [0.9, 0.8, 0.1]
    t, v = m.mask_class([U, U], [0.3, 0.4])
    assert t.tolist() == [] and v.tolist() == []
    t, v = m.mask_class([1, 0], [0.3, 0.4])
    assert t.tolist() == [1, 0] and v.tolist() == [0.3, 0.4]
    with pytest.raises(m.MetricError):
        m.mask_class([1, 0], [0.3])


def test_binarize():
    assert m.binarize([0.9, 0.5, 0.49]).tolist() == [1, 1, 0]
    assert m.binarize([]).tolist() == []
    for bad in (0.0, 1.0, -0.1, 2):
        with pytest.raises(m.MetricError):
            m.binarize([0.5], bad)


@settings(max_examples=100)
@given(hnp.arrays(np.float64, st.integers(0, 30), elements=st.floats(0, 1)), st.floats(0.01, 0.99))
def test_binarize_matches_elementwise(values, threshold):
    out = m.binarize(values, threshold)
    assert out.tolist() == [1 if v >= threshold else 0 for v in values]


def test_class_f1():
    assert m.class_f1([1, 0, U, 1], [1, 1, 0, 0]) == 0.5
    assert m.class_f1([1, U, 0, U, 1], [1, 1, 0, 0, 1]) == 1.0
    assert m.class_f1([U, U, U], [1, 0, 1]) is None
    assert m.class_f1([0, 0], [0, 0]) == 0.0
    with pytest.raises(m.MetricError):
        m.class_f1([1, 0], [1])


def test_macro_f1():
    assert m.macro_f1(np.array([[1], [0]]), np.array([[1], [0]])) == 1.0
    truth = np.array([[1, 1], [0, 0]])
    pred = np.array([[0, 1], [1, 0]])
    assert m.macro_f1(truth, pred) == 0.5
    truth = np.array([[1, U], [0, U]])
    assert m.macro_f1(truth, np.array([[1, 1], [0, 1]])) == 1.0
    with pytest.raises(m.MetricError):
        m.macro_f1(np.array([[U, U]]), np.array([[1, 1]]))


def test_masked_accuracy():
    assert m.masked_accuracy(np.array([[1], [0], [U], [1]]), np.array([[1], [1], [0], [0]])) == pytest.approx(1 / 3)
    truth = np.array([[1, 0], [0, 1]])
    assert m.masked_accuracy(truth, truth) == 1.0
    assert m.masked_accuracy(truth, 1 - truth) == 0.0


def test_table2_macro():
    assert m.mean_score(TABLE2_F1) == pytest.approx(0.58, abs=0.005)


def test_table2_weighted():
    f1 = dict(zip(TABLE2_CLASSES, TABLE2_F1))
    test_w = m.OccurrenceWeights(dict(zip(TABLE2_CLASSES, TABLE2_TEST)))
    train_w = m.OccurrenceWeights(dict(zip(TABLE2_CLASSES, TABLE2_TRAIN)))
    assert m.weighted_macro_f1(f1, test_w) == pytest.approx(0.65, abs=0.005)
    assert m.weighted_macro_f1(f1, train_w) == pytest.approx(0.61, abs=0.005)
    assert m.round_half_away(m.weighted_macro_f1(f1, test_w)) == 0.65
    assert m.round_half_away(m.weighted_macro_f1(f1, train_w)) == 0.61
    assert m.round_half_away(m.mean_score(f1)) == 0.58


def test_weighted_errors():
    with pytest.raises(m.MetricError, match="AU02"):
        m.weighted_macro_f1({"AU01": 0.5, "AU02": 0.3}, {"AU01": 3})
    with pytest.raises(m.MetricError):
        m.weighted_macro_f1({"AU01": 0.5}, {"AU01": 0})


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=15), st.integers(1, 10**6))
def test_uniform_weights_equal_macro_exactly(scores, w):
    per = {f"c{i}": s for i, s in enumerate(scores)}
    assert m.weighted_macro_f1(per, {k: w for k in per}) == m.mean_score(per)


def test_round_half_away():
    assert m.round_half_away(0.125) == 0.13
    assert m.round_half_away(0.585) == 0.59
    assert m.round_half_away(-0.125) == -0.13


def test_selection_score():
    rep = m.report_from_scores({"a": 1.0}, accuracy=1.0)
    assert m.selection_score(rep) == 1.0
    rep = m.report_from_scores({"a": 0.6}, accuracy=0.8)
    assert m.selection_score(rep) == pytest.approx(0.7)
    rng = np.random.default_rng(3)
    for _ in range(50):
        f, a = rng.random(2)
        rep = m.report_from_scores({"a": f}, accuracy=a)
        assert rep.selection_score == (f + a) / 2


def test_skipped_classes_reported():
    truth = np.array([[1, U], [0, U]])
    rep = m.evaluate(truth, np.array([[0.9, 0.1], [0.2, 0.3]]), ["a", "b"])
    assert rep.skipped_classes == ("b",)
    assert rep.per_class_f1 == {"a": 1.0, "b": None}
    assert rep.macro_f1 == 1.0


def test_exhaustive_small_columns():
    """Every ternary column up to length 6 against every binary prediction."""
    for n in range(1, 7):
        preds = np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.int8)
        for truth in itertools.product([U, 0, 1], repeat=n):
            t = np.array(truth, dtype=np.int8)
            for p in preds:
                c = m.confusion_counts(t, p)
                assert (int(c.tp[0]), int(c.fp[0]), int(c.fn[0]), int(c.tn[0])) == brute_counts(truth, p)
            # f1 on a sample of predictions
            for p in preds[:: max(1, len(preds) // 8)]:
                expect = brute_f1(truth, p)
                got = m.class_f1(t, p)
                assert (got is None) == (expect is None)
                if got is not None:
                    assert got == pytest.approx(expect, abs=1e-15)


def test_random_matrices_against_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n, k = rng.integers(1, 11), rng.integers(1, 6)
        _, y = random_pair(rng, n, k, rng.uniform(0, 0.8))
        p = (rng.random((n, k)) < 0.5).astype(np.int8)
        f1 = [brute_f1(y[:, j], p[:, j]) for j in range(k)]
        acc = [brute_accuracy(y[:, j], p[:, j]) for j in range(k)]
        kept = [v for v in f1 if v is not None]
        if not kept:
            with pytest.raises(m.MetricError):
                m.macro_f1(y, p)
            continue
        assert m.macro_f1(y, p) == pytest.approx(sum(kept) / len(kept), abs=1e-15)
        kept_acc = [v for v in acc if v is not None]
        assert m.masked_accuracy(y, p) == pytest.approx(sum(kept_acc) / len(kept_acc), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_masking_and_padding_invariance(data):
    n = data.draw(st.integers(1, 12))
    k = data.draw(st.integers(1, 5))
    y = data.draw(hnp.arrays(np.int8, (n, k), elements=st.sampled_from([U, 0, 1])))
    p = data.draw(hnp.arrays(np.float64, (n, k), elements=st.floats(0, 1)))
    if not (y != U).any():
        return
    noise = data.draw(hnp.arrays(np.float64, (n, k), elements=st.floats(0, 1)))
    p2 = np.where(y == U, noise, p)
    weights = {f"c{j}": j + 1 for j in range(k)}
    a = m.evaluate(y, p, weights={"w": weights}, class_names=list(weights))
    b = m.evaluate(y, p2, weights={"w": weights}, class_names=list(weights))
    assert a.to_json() == b.to_json()
    pad = data.draw(st.integers(1, 4))
    yp = np.vstack([y, np.full((pad, k), U, dtype=np.int8)])
    pp = np.vstack([p, np.full((pad, k), 0.7)])
    c = m.evaluate(yp, pp, weights={"w": weights}, class_names=list(weights))
    assert c.macro_f1 == a.macro_f1 and c.accuracy == a.accuracy
    assert c.weighted_macro_f1 == a.weighted_macro_f1


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=6))
def test_f1_bounds_and_perfection(triples):
    for tp, fp, fn in triples:
        f = m._f1_from_counts(tp, fp, fn)
        assert 0.0 <= f <= 1.0
        assert (f == 1.0) == (fp == 0 and fn == 0 and tp > 0)
        if tp + fp > 0 and tp + fn > 0 and tp > 0:
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            assert math.isclose(f, 2 * precision * recall / (precision + recall), rel_tol=1e-14)


def test_report_table_and_json():
    f1 = dict(zip(TABLE2_CLASSES, TABLE2_F1))
    rep = m.report_from_scores(f1, weights={"test": dict(zip(TABLE2_CLASSES, TABLE2_TEST)),
                                            "train": dict(zip(TABLE2_CLASSES, TABLE2_TRAIN))})
    table = rep.format_table()
    assert "F1 macro           0.58" in table
    assert "0.65  (test)" in table and "0.61  (train)" in table
    assert '"macro_f1"' in rep.to_json()
