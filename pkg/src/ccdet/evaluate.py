"""1D interval geometry and the AP evaluation protocol.

IoU here is overlap length over union span of the two intervals.  AP follows
the literal rule "average the maximum precision at-or-after each unique
achieved recall"; a 101-point interpolated mode is available for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Interval:
    begin: int
    end: int

    def __post_init__(self):
        if self.begin >= self.end:
            raise ValueError(f"empty interval [{self.begin}, {self.end})")

    @property
    def width(self):
        return self.end - self.begin

    @property
    def center(self):
        return 0.5 * (self.begin + self.end)


@dataclass(frozen=True)
class Detection:
    interval: Interval
    score: float
    scale_index: int = -1


def iou_1d(a, b) -> float:
    """IoU of two intervals; accepts Interval or (begin, end) pairs."""
    a0, a1 = (a.begin, a.end) if isinstance(a, Interval) else a
    b0, b1 = (b.begin, b.end) if isinstance(b, Interval) else b
    overlap = min(a1, b1) - max(a0, b0)
    if overlap <= 0:
        return 0.0
    return overlap / (max(a1, b1) - min(a0, b0))


def iou_matrix(begins_a, ends_a, begins_b, ends_b):
    """Pairwise IoU for arrays of half-open intervals, shape (len(a), len(b))."""
    a0 = np.asarray(begins_a, dtype=np.float64)[:, None]
    a1 = np.asarray(ends_a, dtype=np.float64)[:, None]
    b0 = np.asarray(begins_b, dtype=np.float64)[None, :]
    b1 = np.asarray(ends_b, dtype=np.float64)[None, :]
    overlap = np.maximum(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0)
    union = np.maximum(a1, b1) - np.minimum(a0, b0)
    return overlap / union


def detection_sort_key(det: Detection):
    """Higher score first; ties by earlier begin, then smaller scale index."""
    return (-det.score, det.interval.begin, det.scale_index)


def nms(candidates, iou_threshold):
    """Greedy NMS: keep the best-scoring candidate, drop overlaps above threshold."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"NMS threshold {iou_threshold} outside [0, 1]")
    ordered = sorted(candidates, key=detection_sort_key)
    kept = []
    for det in ordered:
        if all(iou_1d(det.interval, k.interval) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def match_detections(dets, gts, tau):
    """Per-detection TP flags under the one-match-per-ground-truth rule.

    Detections are processed in score order (with the deterministic tie rule);
    each claims the best-IoU unmatched ground truth with IoU >= tau.
    """
    order = sorted(range(len(dets)), key=lambda i: detection_sort_key(dets[i]))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou_1d(dets[i].interval, gt)
            if v > best_iou or (v == best_iou and best_j >= 0
                                and v >= tau and gt.begin < gts[best_j].begin):
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= tau:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(dets, gts, tau, interpolation="unique-recall"):
    """AP at one IoU threshold.

    ``unique-recall`` implements the literal rule: mean over unique achieved
    recalls of the maximum precision at-or-after that recall.  ``coco101``
    averages interpolated precision over 101 evenly spaced recall points.
    """
    if not gts:
        raise ValueError("average_precision: no ground truths")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: detection_sort_key(dets[i]))
    flags = match_detections(dets, gts, tau)
    tp = np.cumsum([1.0 if flags[i] else 0.0 for i in order])
    n = np.arange(1, len(order) + 1)
    precision = tp / n
    recall = tp / len(gts)
    # max precision at-or-after each point in the ranked list
    max_prec_after = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco101":
        grid = np.linspace(0.0, 1.0, 101)
        interp = np.zeros_like(grid)
        for gi, r in enumerate(grid):
            ok = recall >= r
            interp[gi] = max_prec_after[ok][0] if ok.any() else 0.0
        return float(interp.mean())
    if interpolation != "unique-recall":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    uniques = {}
    for r, p in zip(recall, max_prec_after):
        if r > 0 and r not in uniques:
            uniques[r] = p
    if not uniques:
        return 0.0
    return float(np.mean(list(uniques.values())))


@dataclass
class EvalReport:
    ap_per_threshold: dict = field(default_factory=dict)  # tau -> AP
    map: float = 0.0
    tp: int = 0
    fp: int = 0
    missed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "ap_per_threshold": [self.ap_per_threshold[t] for t in IOU_THRESHOLDS],
            "map": self.map,
            "tp": self.tp,
            "fp": self.fp,
            "missed": self.missed,
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        raw = json.loads(text)
        per = dict(zip(IOU_THRESHOLDS, raw["ap_per_threshold"]))
        return EvalReport(per, raw["map"], raw["tp"], raw["fp"], raw["missed"])


def ap_range(dets, gts, interpolation="unique-recall") -> EvalReport:
    """AP at tau in {0.50, ..., 0.95} plus their mean and TP/FP counts at 0.50."""
    report = EvalReport()
    for tau in IOU_THRESHOLDS:
        report.ap_per_threshold[tau] = average_precision(dets, gts, tau, interpolation)
    report.map = float(np.mean(list(report.ap_per_threshold.values())))
    flags = match_detections(dets, gts, 0.5)
    report.tp = sum(flags)
    report.fp = len(flags) - report.tp
    report.missed = len(gts) - report.tp
    return report
