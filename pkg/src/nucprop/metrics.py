"""Evaluation: category-wise nucleus IoU, instance AP ranked by score or entropy, flow EPE."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DimensionError, mean_over_instance
from .propagate import Action
from .tracker import iou_table

log = logging.getLogger(__name__)

CATEGORIES = ("all", "updated", "interpolated", "non_updated")


@dataclass
class CategoryReport:
    mean_iou: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __getitem__(self, category):
        return self.mean_iou[category]

    def to_dict(self):
        return {f"iou_{c}": self.mean_iou[c] for c in CATEGORIES} | {"counts": dict(self.counts)}


@dataclass(frozen=True)
class DetectionRecord:
    frame: int
    instance_id: int
    score: float
    uncertainty: float = 0.0
    ious: dict = field(default_factory=dict)  # gt id -> IoU
    matched_gt: int | None = None
    iou: float = 0.0


def _category(action) -> str:
    if action is None or action is Action.NONE:
        return "non_updated"
    if action is Action.INTERPOLATED:
        return "interpolated"
    return "updated"


def mean_iou_by_category(pred_cells, pred_nuclei, gt_cells, gt_nuclei, update_log=None,
                         per_nucleus=False):
    """Mean nucleus IoU split by what propagation did to each nucleus.

    Every GT cell is matched to the predicted cell of highest IoU in the same
    frame; the predicted nucleus carrying that cell's id is compared with the
    GT nucleus.  The category comes from the update log entry of that
    predicted cell (no entry means non-updated).
    """
    actions = {}
    for e in update_log or ():
        actions[(e.frame, e.cell_id)] = e.action
    sums = dict.fromkeys(CATEGORIES, 0.0)
    counts = dict.fromkeys(CATEGORIES, 0)
    rows = []
    for f in range(len(gt_cells)):
        gc, gn = np.asarray(gt_cells[f]), np.asarray(gt_nuclei[f])
        pc, pn = np.asarray(pred_cells[f]), np.asarray(pred_nuclei[f])
        if not gc.shape == gn.shape == pc.shape == pn.shape:
            raise DimensionError(f"frame {f}: prediction and ground truth shapes differ")
        gt_ids, pred_ids, table = iou_table(gc, pc)
        for i, gid in enumerate(gt_ids):
            truth = gn == gid
            if not truth.any():
                continue
            pid = None
            if pred_ids.size and table[i].max() > 0:
                pid = int(pred_ids[int(np.argmax(table[i]))])
            if pid is None:
                score, cat = 0.0, "non_updated"
            else:
                pred = pn == pid
                union = np.count_nonzero(truth | pred)
                score = np.count_nonzero(truth & pred) / union
                cat = _category(actions.get((f, pid)))
            for c in ("all", cat):
                sums[c] += score
                counts[c] += 1
            rows.append((f, int(gid), pid, cat, score))
    if counts["all"] == 0:
        raise ValueError("no ground-truth nuclei to evaluate")
    means = {c: (sums[c] / counts[c] if counts[c] else math.nan) for c in CATEGORIES}
    report = CategoryReport(means, counts)
    return (report, rows) if per_nucleus else report


def collect_detections(pred_nuclei, gt_nuclei, scores=None, uncertainty=None):
    """One DetectionRecord per predicted nucleus with its IoU against every GT nucleus."""
    dets, gts = [], []
    for f in range(len(gt_nuclei)):
        pred_ids, gt_ids, table = iou_table(pred_nuclei[f], gt_nuclei[f])
        gts.extend((f, int(g)) for g in gt_ids)
        for i, pid in enumerate(pred_ids):
            pid = int(pid)
            score = 1.0 if scores is None else float(scores[f].get(pid, 0.0))
            unc = 0.0 if uncertainty is None else mean_over_instance(
                uncertainty[f], pred_nuclei[f], pid)
            ious = {int(g): float(v) for g, v in zip(gt_ids, table[i]) if v > 0}
            dets.append(DetectionRecord(f, pid, score, unc, ious))
    return dets, gts


def average_precision(dets, gts, iou_threshold=0.5, score_mode="sm", return_matches=False):
    """All-point interpolated AP.

    ``score_mode`` "sm" ranks by score (descending), "ent" by mean
    uncertainty (ascending, i.e. score ``-uncertainty``).  Detections are
    matched greedily in rank order to the unmatched GT of highest IoU that
    reaches the threshold.
    """
    mode = score_mode.lower()
    if mode not in ("sm", "ent"):
        raise ValueError(f"unknown score mode {score_mode!r}")
    gts = list(gts)
    if not gts:
        if dets:
            return (0.0, []) if return_matches else 0.0
        log.info("AP with no ground truth and no detections defined as 1.0")
        return (1.0, []) if return_matches else 1.0

    def key(d):
        s = d.score if mode == "sm" else -d.uncertainty
        return (-s, d.frame, d.instance_id)

    ranked = sorted(dets, key=key)
    taken = set()
    tp = np.zeros(len(ranked))
    matched = []
    for k, d in enumerate(ranked):
        free = [(v, -g) for g, v in d.ious.items()
                if (d.frame, g) not in taken and v >= iou_threshold]
        best = None
        if free:
            best_iou, neg_g = max(free)
            best = -neg_g
        if best is not None:
            taken.add((d.frame, best))
            tp[k] = 1
            matched.append(replace(d, matched_gt=best, iou=best_iou))
        else:
            matched.append(d)

    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(ranked) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return (ap, matched) if return_matches else ap


def flow_epe(est, gt, region=None) -> float:
    if est.shape != gt.shape:
        raise DimensionError(f"flow shapes differ: {est.shape} vs {gt.shape}")
    err = np.hypot(np.asarray(est.u, np.float64) - gt.u, np.asarray(est.v, np.float64) - gt.v)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != err.shape:
            raise DimensionError("region shape differs from flow shape")
        if not region.any():
            raise ValueError("end-point error over an empty region")
        err = err[region]
    return float(err.mean())
