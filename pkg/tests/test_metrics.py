import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tbdetect.imagecore import DimensionError
from tbdetect.metrics import (ConfusionCounts, aggregate_seg, classification_scores, dice, f1_from, fmt,
                              jaccard, truncate)

HALF = np.zeros((256, 256), np.uint8)
HALF[:, :128] = 1
FULL = np.ones((256, 256), np.uint8)


def test_jaccard_examples():
    assert jaccard(HALF, HALF) == 1.0
    assert jaccard(HALF, 1 - HALF) == 0.0
    assert jaccard(HALF, FULL) == 0.5
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_examples():
    assert dice(HALF, FULL) == pytest.approx(2 / 3, abs=1e-15)
    assert dice(FULL, FULL) == 1.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        jaccard(np.zeros((3, 3)), np.zeros((3, 4)))


masks = arrays(np.uint8, st.tuples(st.integers(1, 24), st.integers(1, 24)), elements=st.integers(0, 1))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_overlap_identities(data):
    a = data.draw(masks)
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    j, d = jaccard(a, b), dice(a, b)
    assert j == jaccard(b, a) and d == dice(b, a)
    assert 0 <= j <= d <= 1
    assert abs(d - 2 * j / (1 + j)) <= 1e-12
    if d == j:
        assert j in (0.0, 1.0)


def test_classification_examples():
    s = classification_scores(ConfusionCounts(tp=6, tn=7, fp=4, fn=3))
    assert s.precision == pytest.approx(0.6)
    assert s.recall == pytest.approx(2 / 3)
    assert s.accuracy == pytest.approx(0.65)
    assert s.f1 == pytest.approx(2 * 0.6 * (2 / 3) / (0.6 + 2 / 3), abs=1e-15)
    perfect = classification_scores(ConfusionCounts(tp=9))
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1, 1, 1, 1)


def test_f1_table_row_truncates():
    f1 = f1_from(0.9, 0.75)
    assert truncate(f1, 4) == 0.8181
    assert fmt(f1) == "0.8181"
    # Panicker row of the same table: 0.6711 / 0.6 -> 0.6335
    assert fmt(f1_from(0.6711, 0.6)) == "0.6335"


def test_undefined_rates():
    s = classification_scores(ConfusionCounts(tn=5))
    assert s.precision is None and s.recall is None and s.f1 is None
    assert s.accuracy == 1.0
    assert fmt(s.precision) == "n/a"
    assert classification_scores(ConfusionCounts()).accuracy is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_harmonic_mean(tp, tn, fp, fn):
    s = classification_scores(ConfusionCounts(tp, tn, fp, fn))
    if s.f1 is not None:
        assert s.f1 == pytest.approx(2 * s.precision * s.recall / (s.precision + s.recall), rel=1e-12)
        assert min(s.precision, s.recall) - 1e-12 <= s.f1 <= max(s.precision, s.recall) + 1e-12


def test_confusion_from_labels():
    c = ConfusionCounts.from_labels([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 1, 1)


def test_aggregate_modes():
    a = np.zeros((4, 4), np.uint8); a[:2] = 1
    b = np.ones((4, 4), np.uint8)
    c = np.zeros((2, 2), np.uint8); d = np.zeros((2, 2), np.uint8); d[0, 0] = 1
    mean = aggregate_seg([(a, b), (c, d)])
    pooled = aggregate_seg([(a, b), (c, d)], "pooled")
    assert mean.jaccard == pytest.approx((0.5 + 0.0) / 2)
    assert pooled.jaccard == pytest.approx(8 / 17)
