import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionbench.metrics import (
    ConfusionAccumulator,
    DimensionMismatchError,
    EmptyMeanError,
    accumulate,
    build_report,
    dice,
    dice_from_counts,
    f1_score,
    iou,
    iou_from_counts,
    mean_over_lesions,
    micro_pixel_metrics,
    relative_improvement,
    tn_rate,
)
from oracles import oracle_metrics


def mask_pair(max_side=16):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda hw: st.tuples(arrays(np.uint8, hw, elements=st.integers(0, 5)),
                             arrays(np.uint8, hw, elements=st.integers(0, 5))))


def acc_of(gt, pred):
    return accumulate(ConfusionAccumulator.zero(), gt, pred)


@settings(max_examples=200, deadline=None)
@given(mask_pair())
def test_matches_pixel_oracle(pair):
    gt, pred = pair
    acc = acc_of(gt, pred)
    ref = oracle_metrics(gt.tolist(), pred.tolist())
    for c in range(6):
        assert acc.counts(c) == tuple(ref["counts"][c])
        assert dice(acc, c) == ref["dice"][c]
        assert iou(acc, c) == ref["iou"][c]
    pm = micro_pixel_metrics(acc)
    assert (pm.tpr, pm.ppv, pm.f1) == (ref["tpr"], ref["ppv"], ref["f1"])
    assert tn_rate(acc) == ref["tn_rate"]


@settings(max_examples=100, deadline=None)
@given(mask_pair(8), mask_pair(8), mask_pair(8))
def test_merge_is_associative_and_commutative(p1, p2, p3):
    a, b, c = (acc_of(*p) for p in (p1, p2, p3))
    assert a.merge(b) == b.merge(a)
    assert (a + b) + c == a + (b + c)
    assert a + ConfusionAccumulator.zero() == a


@settings(max_examples=50, deadline=None)
@given(mask_pair(8))
def test_tallies_cover_every_pixel(pair):
    gt, _ = pair
    acc = acc_of(*pair)
    for c in range(6):
        tp, fp, fn, tn = acc.counts(c)
        assert tp + fp + fn + tn == gt.size
    assert acc.total_pixels == gt.size


def test_pooling_differs_from_averaging_per_image():
    gt1 = np.array([[1, 1], [1, 1]]); pr1 = np.array([[1, 1], [1, 0]])
    gt2 = np.array([[1, 0], [0, 0]]); pr2 = np.array([[0, 0], [0, 0]])
    pooled = acc_of(gt1, pr1) + acc_of(gt2, pr2)
    # tp=3, fp=0, fn=2 over both images.
    assert dice(pooled, 1) == 6 / 8


def test_perfect_prediction_scores_one():
    gt = np.array([[0, 1], [2, 3]])
    acc = acc_of(gt, gt)
    assert all(dice(acc, c) == 1.0 for c in range(4))
    assert dice(acc, 5) is None
    assert build_report(acc).mean_dice == 1.0


def test_absent_class_is_undefined_not_zero():
    acc = acc_of(np.zeros((3, 3)), np.zeros((3, 3)))
    assert dice(acc, 2) is None and iou(acc, 2) is None
    assert dice_from_counts(0, 0, 0) is None and iou_from_counts(0, 0, 0) is None


def test_mean_skips_background_and_undefined():
    assert mean_over_lesions({0: 0.1, 1: 0.5, 2: None, 3: 0.7}) == pytest.approx(0.6)
    assert mean_over_lesions({"IRF": 0.2, "HE": 0.4}) == pytest.approx(0.3)
    with pytest.raises(EmptyMeanError):
        mean_over_lesions({0: 1.0, 1: None})


def test_f1_edge_cases():
    assert f1_score(None, 0.5) is None
    assert f1_score(0.0, 0.0) == 0.0
    assert f1_score(0.8547, 0.8606) == pytest.approx(0.8576, abs=1e-4)


def test_tn_rate_all_background_prediction():
    acc = acc_of(np.zeros((4, 4)), np.zeros((4, 4)))
    assert tn_rate(acc) == 1.0
    acc = acc_of(np.zeros((2, 2)), np.array([[0, 1], [0, 0]]))
    assert tn_rate(acc) == 0.75


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        acc_of(np.zeros((2, 2)), np.zeros((2, 3)))


def test_relative_improvement():
    assert relative_improvement(0.8547, 0.7736) * 100 == pytest.approx(9.48, abs=0.05)
    assert relative_improvement(0.5, 0.5) == 0.0
    with pytest.raises(ValueError):
        relative_improvement(0.0, 0.1)


@settings(max_examples=50, deadline=None)
@given(mask_pair(8))
def test_report_rates_in_unit_interval(pair):
    r = build_report(acc_of(*pair), with_tn_rate=True)
    for v in (r.mean_dice, r.mean_iou, r.micro_tpr, r.micro_ppv, r.micro_f1, r.tn_rate):
        assert v is None or 0.0 <= v <= 1.0
    defined = [s.dice for name, s in r.per_class.items() if name != "background" and s.dice is not None]
    if defined:
        assert r.mean_dice == pytest.approx(sum(defined) / len(defined))
