import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradformer.errors import DimensionError, FormatError
from gradformer.metrics import ConfusionCounts, MetricsReport, confusion
from oracles import confusion_loops

masks = hnp.arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 1))


def test_known_counts():
    pred = np.array([[1, 1, 0, 0]])
    gt = np.array([[1, 0, 1, 0]])
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
    assert c.f1 == 0.5 and c.iou == pytest.approx(1 / 3) and c.oa == 50.0


def test_empty_denominators_give_zero():
    c = confusion(np.zeros((2, 2)), np.zeros((2, 2)))
    assert c.f1 == 0.0 and c.iou == 0.0 and c.oa == 100.0
    assert ConfusionCounts().oa == 0.0


def test_micro_average_sums_counts():
    a = confusion(np.array([1, 0]), np.array([1, 1]))
    b = confusion(np.array([1, 1]), np.array([0, 0]))
    total = a + b
    assert total.f1 == pytest.approx(2 * 1 / (2 * 1 + 2 + 1))


def test_rejects_non_binary_and_mismatched():
    with pytest.raises(ValueError):
        confusion(np.array([2]), np.array([1]))
    with pytest.raises(DimensionError):
        confusion(np.zeros(3), np.zeros(4))


@given(masks)
def test_counts_match_loops(gt):
    pred = np.roll(gt, 1)
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == confusion_loops(pred, gt)
    assert c.total == gt.size


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_iou_f1_identity(tp, fp, fn, tn):
    c = ConfusionCounts(tp, fp, fn, tn)
    assert 0 <= c.iou <= c.f1 <= 1
    assert c.iou == pytest.approx(c.f1 / (2 - c.f1), abs=1e-12)


def test_report_text_round_trip():
    report = MetricsReport.from_counts(ConfusionCounts(3, 60, 65, 896))
    text = report.to_text()
    assert text.splitlines()[3:] == ["tp=3", "fp=60", "fn=65", "tn=896"]
    assert MetricsReport.from_text(text) == report


def test_report_missing_key():
    with pytest.raises(FormatError):
        MetricsReport.from_text("f1=0.5\n")
