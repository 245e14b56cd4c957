import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddpcil.errors import DomainError, UsageError
from ddpcil.metrics import (
    MetricsRecord,
    MetricsReport,
    UndefinedAPError,
    aggregate,
    average_precision,
    f1_scores,
    false_positive_rate,
    score_predictions,
)
from ddpcil.numerics import sigmoid
from oracles import ap_bruteforce, f1_bruteforce, fpr_bruteforce, random_instance


def test_ap_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0


def test_ap_alternating():
    assert average_precision([4, 3, 2, 1], [1, 0, 1, 0]) == pytest.approx(0.833333, abs=5e-7)


def test_ap_single_positive_last():
    assert average_precision([4, 3, 2, 1], [0, 0, 0, 1]) == 0.25


def test_ap_ties_break_by_index():
    assert average_precision([1.0, 1.0], [0, 1]) == 0.5
    assert average_precision([1.0, 1.0], [1, 0]) == 1.0


def test_ap_without_positives():
    with pytest.raises(UndefinedAPError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_shape_mismatch():
    with pytest.raises(DomainError):
        average_precision([0.1, 0.2], [1])


def test_f1_identity_and_complement():
    y = np.array([[1, 0], [0, 1], [1, 1]], dtype=bool)
    assert f1_scores(y, y) == (1.0, 1.0)
    assert f1_scores(~y, y) == (0.0, 0.0)


def test_f1_confusion_example():
    # class A: TP1 FP1 FN0, class B: TP0 FP0 FN1
    d = np.array([[1, 0], [1, 0]], dtype=bool)
    y = np.array([[1, 1], [0, 0]], dtype=bool)
    cf1, of1 = f1_scores(d, y)
    assert cf1 == pytest.approx(1 / 3, abs=1e-15)
    assert of1 == 0.5


def test_f1_empty_class_scores_zero():
    d = np.zeros((2, 1), dtype=bool)
    assert f1_scores(d, d) == (0.0, 0.0)


def test_fpr_cases():
    y = np.zeros((3, 1), dtype=bool)
    assert false_positive_rate(np.zeros((3, 1), dtype=bool), y) == 0.0
    assert false_positive_rate(np.ones((3, 1), dtype=bool), y) == 1.0
    assert false_positive_rate(np.array([[1], [0], [0]], dtype=bool), y) == pytest.approx(1 / 3)


def test_fpr_needs_a_negative():
    with pytest.raises(DomainError):
        false_positive_rate([[True]], [[True]])


def test_metrics_match_bruteforce_oracles():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 1000:
        scores, labels, dec = random_instance(rng)
        for c in range(labels.shape[1]):
            if labels[:, c].any():
                want = ap_bruteforce(scores[:, c].tolist(), labels[:, c].tolist())
                assert abs(average_precision(scores[:, c], labels[:, c]) - float(want)) <= 1e-12
        cf1, of1 = f1_scores(dec, labels)
        want_c, want_o = f1_bruteforce(dec.tolist(), labels.tolist())
        assert abs(cf1 - float(want_c)) <= 1e-12 and abs(of1 - float(want_o)) <= 1e-12
        if (~labels).any():
            assert abs(false_positive_rate(dec, labels) - float(fpr_bruteforce(dec.tolist(), labels.tolist()))) <= 1e-12
        checked += 1


@given(
    arrays(np.int64, 12, elements=st.integers(-1000, 1000)),
    arrays(np.bool_, 12).filter(lambda y: y.any()),
    st.floats(0.1, 50.0),
)
def test_ap_invariant_under_tempered_sigmoid(margins, labels, tau):
    m = margins / 1000.0
    # distinct grid points stay distinct after the transform at this spacing
    assert average_precision(sigmoid(m / tau), labels) == average_precision(m, labels)


@given(arrays(np.bool_, (5, 3)), arrays(np.bool_, (5, 3)))
def test_f1_bounds_and_fpr_complement(dec, y):
    cf1, of1 = f1_scores(dec, y)
    assert 0.0 <= of1 <= 1.0
    tp = (dec & y).sum(0)
    denom = 2 * tp + (dec & ~y).sum(0) + (~dec & y).sum(0)
    per = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    assert cf1 <= per.max() + 1e-15
    if (~y).any():
        tnr = (~dec & ~y).sum() / (~y).sum()
        assert false_positive_rate(dec, y) + tnr == pytest.approx(1.0, abs=1e-15)


def _record(task, mAP, op="default"):
    return MetricsRecord(task, 4, op, 0.5, 1.0, mAP, 0.5, 0.5, 0.1)


def test_aggregate_identical_records():
    rep = aggregate([_record(1, 0.7), _record(2, 0.7), _record(3, 0.7)])
    assert rep.avg["default"] == pytest.approx(rep.last["default"], abs=1e-15)


def test_aggregate_two_tasks():
    rep = aggregate([_record(1, 0.8), _record(2, 0.6)])
    assert rep.avg["default"]["mAP"] == pytest.approx(0.7, abs=1e-15)
    assert rep.last["default"]["mAP"] == 0.6


def test_aggregate_single_task_last_equals_avg():
    rep = aggregate([_record(1, 0.42)])
    assert rep.last == rep.avg


def test_aggregate_missing_task():
    with pytest.raises(UsageError):
        aggregate([_record(1, 0.8), _record(3, 0.6)])
    with pytest.raises(UsageError):
        aggregate([])


def test_report_round_trip_is_byte_identical():
    recs = [_record(1, 0.8), _record(2, 0.6), _record(1, 0.8, "high-confidence"), _record(2, 0.55, "high-confidence")]
    rep = aggregate(recs, manifest_hash="abc")
    text = rep.to_json()
    again = MetricsReport.from_json(text)
    assert again.to_json() == text
    assert json.loads(text)["manifest_hash"] == "abc"
    assert again.to_csv().splitlines()[0].startswith("task,num_classes")


def test_score_predictions_operating_points_and_exclusion():
    conf = np.array([[0.9, 0.52], [0.4, 0.56], [0.5, 0.1]])
    y = np.array([[1, 0], [0, 0], [1, 0]], dtype=bool)
    recs = score_predictions(conf, y, [3, 7], task=2, operating_points={"default": 0.5, "high-confidence": 0.55})
    assert [r.operating_point for r in recs] == ["default", "high-confidence"]
    assert recs[0].excluded_classes == [7]
    assert list(recs[0].per_class_ap) == ["3"]
    # 0.5 sits exactly on the default threshold and counts as positive
    assert recs[0].FPR == pytest.approx(2 / 4)
    assert recs[1].FPR == pytest.approx(1 / 4)


def test_score_predictions_ranks_by_given_scores():
    conf = np.array([[0.5], [0.5]])
    y = np.array([[0], [1]], dtype=bool)
    margins = np.array([[0.0], [2.2e-16]])
    assert score_predictions(conf, y, [0], 1, {"default": 0.5})[0].mAP == 0.5
    assert score_predictions(conf, y, [0], 1, {"default": 0.5}, rank_scores=margins)[0].mAP == 1.0
    with pytest.raises(DomainError):
        score_predictions(conf, y, [0], 1, {"default": 0.5}, rank_scores=np.zeros((3, 1)))
