import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nucprop.core import FlowField
from nucprop.metrics import (DetectionRecord, average_precision, collect_detections, flow_epe,
                             mean_iou_by_category)
from nucprop.propagate import Action, LogEntry

from conftest import box
from oracles import ap_all_point

SHAPE = (16, 16)


def _frame(*rects):
    lab = np.zeros(SHAPE, np.int64)
    for k, r in enumerate(rects, start=1):
        if r is not None:
            lab[box(SHAPE, *r)] = k
    return lab


CELLS = _frame((0, 0, 7, 7), (8, 8, 15, 15))
NUCLEI = _frame((2, 2, 5, 5), (10, 10, 13, 13))


def test_perfect_prediction_all_non_updated():
    r = mean_iou_by_category([CELLS], [NUCLEI], [CELLS], [NUCLEI], [])
    assert r["all"] == 1.0 and r["non_updated"] == 1.0
    assert r.counts == {"all": 2, "updated": 0, "interpolated": 0, "non_updated": 2}


def test_missing_nucleus_without_interpolation_counts_as_non_updated_zero():
    pred = [_frame((2, 2, 5, 5), None), NUCLEI]
    log = [LogEntry(0, 0, 1), LogEntry(0, 1, 1)]
    r = mean_iou_by_category([CELLS] * 2, pred, [CELLS] * 2, [NUCLEI] * 2, log)
    assert r.counts["interpolated"] == 0 and r.counts["non_updated"] == 4
    assert r["all"] == pytest.approx(0.75) and r["non_updated"] == pytest.approx(0.75)


def test_missing_nucleus_with_interpolation_entry():
    pred = [_frame((2, 2, 5, 5), None), NUCLEI]
    log = [LogEntry(1, 0, 2, Action.INTERPOLATED, Action.ONE_SIDED_NEXT, (1,))]
    r = mean_iou_by_category([CELLS] * 2, pred, [CELLS] * 2, [NUCLEI] * 2, log)
    assert r.counts["interpolated"] == 1 and r["interpolated"] == 0.0
    assert r.counts["all"] == 4 and r["all"] == pytest.approx(0.75)


def test_updated_category_and_count_identity():
    pred = _frame((2, 2, 5, 5), (10, 10, 13, 11))
    log = [LogEntry(1, 0, 2, Action.TWO_SIDED, Action.TWO_SIDED, (0, 1))]
    r = mean_iou_by_category([CELLS], [pred], [CELLS], [NUCLEI], log)
    assert r["updated"] == pytest.approx(0.5)
    c = r.counts
    assert c["all"] == c["updated"] + c["interpolated"] + c["non_updated"]


def test_empty_log_equals_baseline():
    pred = _frame((2, 2, 5, 4), (10, 10, 13, 13))
    a = mean_iou_by_category([CELLS], [pred], [CELLS], [NUCLEI], [])
    b = mean_iou_by_category([CELLS], [pred], [CELLS], [NUCLEI], None)
    assert a.to_dict() == b.to_dict()


def _det(score, ious, frame=0, iid=1, unc=0.0):
    return DetectionRecord(frame, iid, score, unc, ious)


def test_ap_reference_cases():
    gts = [(0, 1)]
    assert average_precision([_det(0.9, {1: 1.0})], gts) == 1.0
    assert average_precision([], gts) == 0.0
    dets = [_det(0.9, {}, iid=1), _det(0.8, {1: 0.9}, iid=2)]
    assert average_precision(dets, gts) == pytest.approx(0.5)


def test_ap_no_ground_truth():
    assert average_precision([], []) == 1.0
    assert average_precision([_det(0.5, {})], []) == 0.0


def test_ap_entropy_mode_ranks_by_low_uncertainty():
    gts = [(0, 1)]
    dets = [_det(0.9, {}, iid=1, unc=0.8), _det(0.1, {1: 0.9}, iid=2, unc=0.1)]
    assert average_precision(dets, gts, score_mode="sm") == pytest.approx(0.5)
    assert average_precision(dets, gts, score_mode="ent") == 1.0


def test_ap_one_gt_matched_once():
    dets = [_det(0.9, {1: 0.8}, iid=1), _det(0.8, {1: 0.7}, iid=2)]
    ap, matched = average_precision(dets, [(0, 1)], return_matches=True)
    assert ap == 1.0
    assert [m.matched_gt for m in matched] == [1, None]


def _random_case(rng, n_det, n_gt):
    gts = [(0, g) for g in range(1, n_gt + 1)]
    dets = []
    for i in range(n_det):
        g = int(rng.integers(1, n_gt + 1))
        iou = float(rng.choice([0.2, 0.6, 0.9]))
        dets.append(_det(float(rng.random()), {g: iou}, iid=i + 1))
    return dets, gts


def _greedy_flags(dets, thr=0.5):
    taken, flags = set(), []
    for d in sorted(dets, key=lambda d: -d.score):
        (g, v), = d.ious.items()
        ok = v >= thr and g not in taken
        if ok:
            taken.add(g)
        flags.append(ok)
    return flags


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_matches_textbook_and_is_rank_invariant(seed):
    rng = np.random.default_rng(seed)
    dets, gts = _random_case(rng, int(rng.integers(1, 9)), int(rng.integers(1, 5)))
    ap = average_precision(dets, gts)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(ap_all_point(_greedy_flags(dets), len(gts)), abs=1e-12)
    squashed = [DetectionRecord(d.frame, d.instance_id, d.score ** 3 * 5 - 2, 0.0, d.ious)
                for d in dets]
    assert average_precision(squashed, gts) == ap


def test_ap_all_correct_any_order():
    rng = np.random.default_rng(0)
    dets = [_det(float(rng.random()), {g: 0.9}, iid=g) for g in range(1, 6)]
    assert average_precision(dets, [(0, g) for g in range(1, 6)]) == 1.0


def test_collect_detections():
    pred = _frame((2, 2, 5, 5), (10, 10, 13, 11))
    unc = np.where(pred == 2, 0.9, 0.1)
    dets, gts = collect_detections([pred], [NUCLEI], [{1: 0.7, 2: 0.2}], [unc])
    assert gts == [(0, 1), (0, 2)]
    assert [(d.instance_id, d.score) for d in dets] == [(1, 0.7), (2, 0.2)]
    assert dets[0].ious == {1: 1.0} and dets[1].ious == {2: 0.5}
    assert dets[1].uncertainty == pytest.approx(0.9)


def test_flow_epe():
    rng = np.random.default_rng(2)
    gt = FlowField(rng.normal(size=(6, 7)), rng.normal(size=(6, 7)))
    assert flow_epe(gt, gt) == 0.0
    assert flow_epe(FlowField(gt.u + 1, gt.v), gt) == pytest.approx(1.0)
    est = FlowField(rng.normal(size=(6, 7)), rng.normal(size=(6, 7)))
    ref = sum(((est.u[y, x] - gt.u[y, x]) ** 2 + (est.v[y, x] - gt.v[y, x]) ** 2) ** 0.5
              for y in range(6) for x in range(7)) / 42
    assert flow_epe(est, gt) == pytest.approx(ref, abs=1e-12)
