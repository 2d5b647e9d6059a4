import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visaff.metrics import (MetricsReport, assign_bins, bin_by_confidence, confusion_matrix, seed_average,
                            weighted_f1)


def brute_f1(preds, labels, k):
    """Per-class precision/recall counted one sample at a time."""
    f1s, supports = [], []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        supports.append(tp + fn)
    return f1s, sum(f * s for f, s in zip(f1s, supports)) / len(labels)


def test_brute_force_oracle_100_instances(rng):
    for _ in range(100):
        k = int(rng.integers(2, 8))
        labels = rng.integers(0, k, 200)
        preds = np.where(rng.random(200) < 0.5, labels, rng.integers(0, k, 200))
        f1s, wf1 = brute_f1(preds.tolist(), labels.tolist(), k)
        rep = MetricsReport.compute(preds, labels, [str(i) for i in range(k)])
        assert abs(weighted_f1(preds, labels, k) - wf1) < 1e-12
        assert abs(rep.weighted_f1 - wf1) < 1e-12
        assert max(abs(rep.per_class_f1[str(i)] - f1s[i]) for i in range(k)) < 1e-12


def test_hand_examples():
    assert weighted_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert weighted_f1([0, 1, 0, 1], [0, 0, 1, 1], 2) == pytest.approx(0.5)
    # constant predictor on 3:1 labels: F1 for class 0 is 2*0.75/1.75, class 1 scores 0
    assert weighted_f1([0, 0, 0, 0], [0, 0, 0, 1], 2) == pytest.approx(0.75 * (1.5 / 1.75))
    with pytest.raises(ValueError):
        weighted_f1([], [], 2)
    with pytest.raises(ValueError):
        weighted_f1([0], [0, 1], 2)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=50))
def test_report_invariants(pairs):
    preds, labels = zip(*pairs)
    rep = MetricsReport.compute(preds, labels, list("abcd"))
    cm = np.array(rep.confusion)
    assert 0.0 <= rep.weighted_f1 <= 1.0
    assert cm.sum() == len(pairs)
    assert (rep.weighted_f1 == 1.0) == (np.count_nonzero(cm - np.diag(np.diag(cm))) == 0)
    assert rep.accuracy == pytest.approx(np.trace(cm) / cm.sum())
    assert sum(rep.support.values()) == len(pairs)


def test_confusion_orientation():
    cm = confusion_matrix([1, 1], [0, 1], 2)
    assert cm.tolist() == [[0, 1], [0, 1]]


def test_bins_single_mass():
    rep = bin_by_confidence([0.99] * 4, [0, 1, 0, 1], [0, 1, 1, 1], [0, 1, 1, 1], 2)
    assert rep.counts == [0, 0, 0, 0, 4]
    assert rep.gain[:4] == [None] * 4
    assert rep.gain[4] == pytest.approx(1.0 - weighted_f1([0, 1, 0, 1], [0, 1, 1, 1], 2))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=100))
def test_bins_partition(conf):
    n = len(conf)
    rep = bin_by_confidence(conf, [0] * n, [0] * n, [0] * n, 1)
    assert sum(rep.counts) == n


def test_bin_edges():
    assert assign_bins([0.0, 0.2, 0.39999, 1.0], [0, 0.2, 0.4, 1.0]).tolist() == [0, 1, 1, 2]
    for bad in ([0, 0.5, 0.5, 1], [0.1, 1], [0, 0.9], [0]):
        with pytest.raises(ValueError):
            assign_bins([0.5], bad)


def test_bins_csv_header():
    rep = bin_by_confidence([0.1, 0.9], [0, 1], [0, 1], [0, 1], 2)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["bin_lo", "bin_hi", "count", "wf1_visual", "wf1_full", "gain"]
    assert len(rows) == 6


def report(wf1):
    return MetricsReport(accuracy=wf1, weighted_f1=wf1, per_class_f1={"a": wf1}, support={"a": 1}, confusion=[[1]])


def test_seed_average_arithmetic():
    agg = seed_average([({"seed": 0, "h": 4}, report(0.6)), ({"seed": 1, "h": 4}, report(0.8))])
    assert agg.metrics["weighted_f1"]["mean"] == pytest.approx(0.7)
    assert agg.metrics["weighted_f1"]["std"] == pytest.approx(math.sqrt(0.02), abs=1e-12)
    assert agg.metrics["weighted_f1"]["std"] == pytest.approx(0.1414, abs=1e-4)
    same = seed_average([({"seed": s}, report(0.5)) for s in range(3)])
    assert same.metrics["weighted_f1"]["std"] == 0.0
    assert same.seeds == [0, 1, 2]


def test_seed_average_errors():
    with pytest.raises(ValueError):
        seed_average([({"seed": 0}, report(0.5))])
    with pytest.raises(ValueError, match="h"):
        seed_average([({"seed": 0, "h": 4}, report(0.5)), ({"seed": 1, "h": 8}, report(0.5))])
