"""Detection metrics: rotated-IoU mAP, true-positive errors, composite score.

The composite is a desk-scale stand-in for a driving-benchmark score, not
that benchmark's formula::

    composite = (4 * mAP + sum(1 - min(1, e) for e in (ate_n, ase, aoe_n))) / 7

with ``ate_n = ate / (grid_diagonal / 10)`` and ``aoe_n = aoe / pi``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .bev import DetectionBox
from .geometry import aligned_iou, iou_matrix, wrap_angle

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
TP_ERROR_IOU = 0.5


@dataclass
class MetricsReport:
    map: float
    per_class_ap: dict[int, float]
    ate: float
    ase: float
    aoe: float
    grid_diagonal: float
    composite: float = float("nan")
    num_matches: int = 0
    seed: int | None = None
    config_hash: str | None = None
    stage_id: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if math.isnan(self.composite):
            self.composite = compute_composite(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP for detections already sorted by score."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp_arr = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp_arr)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp_arr) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _class_items(preds, gts, k):
    """Sorted class-``k`` detections plus per-sample GT lists and IoU matrices."""
    items = []
    ious, gt_boxes = [], []
    for s, (ps, gs) in enumerate(zip(preds, gts)):
        pk = [p for p in ps if p.class_id == k]
        gk = [g for g in gs if g.class_id == k]
        gt_boxes.append(gk)
        ious.append(iou_matrix([p.as_tuple() for p in pk], [g.as_tuple() for g in gk]))
        items.extend((p.score, s, j, p) for j, p in enumerate(pk))
    items.sort(key=lambda t: -t[0])  # stable: ties keep sample/input order
    return items, gt_boxes, ious


def greedy_match(items, gt_boxes, ious, threshold: float):
    """One-to-one matching in score order; each detection takes its best
    still-unmatched GT. Returns TP flags and matched (pred, gt) pairs."""
    used = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    flags, pairs = [], []
    for _, s, j, p in items:
        row = ious[s][j] if len(gt_boxes[s]) else np.zeros(0)
        best, best_iou = -1, -1.0
        for g in range(len(row)):
            if not used[s][g] and row[g] > best_iou:
                best, best_iou = g, row[g]
        if best >= 0 and best_iou >= threshold:
            used[s][best] = True
            flags.append(True)
            pairs.append((p, gt_boxes[s][best]))
        else:
            flags.append(False)
    return flags, pairs


def compute_map(preds: Sequence[Sequence[DetectionBox]], gts: Sequence[Sequence[DetectionBox]],
                iou_thresholds: Sequence[float] = IOU_THRESHOLDS, num_classes: int | None = None) -> dict:
    """Per-class AP averaged over thresholds, and their mean over classes
    that have ground truth. Also returns the matched pairs at IoU 0.5."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} samples")
    classes = set(range(num_classes)) if num_classes else set()
    for group in (*preds, *gts):
        classes.update(b.class_id for b in group)
    per_class, per_class_thr, tp_pairs = {}, {}, []
    for k in sorted(classes):
        items, gt_boxes, ious = _class_items(preds, gts, k)
        n_gt = sum(len(g) for g in gt_boxes)
        aps = []
        for thr in iou_thresholds:
            flags, pairs = greedy_match(items, gt_boxes, ious, thr)
            aps.append(average_precision(flags, n_gt))
            per_class_thr[(k, thr)] = aps[-1]
            if math.isclose(thr, TP_ERROR_IOU):
                tp_pairs.extend(pairs)
        if TP_ERROR_IOU not in iou_thresholds:
            tp_pairs.extend(greedy_match(items, gt_boxes, ious, TP_ERROR_IOU)[1])
        if n_gt:
            per_class[k] = float(np.mean(aps))
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"map": m, "per_class_ap": per_class, "per_class_threshold_ap": per_class_thr, "tp_pairs": tp_pairs}


def tp_errors(pairs, grid_diagonal: float) -> dict:
    if not pairs:
        return {"ate": grid_diagonal / 10.0, "ase": 1.0, "aoe": math.pi, "num_matches": 0}
    ate = np.mean([math.hypot(p.center_x - g.center_x, p.center_y - g.center_y) for p, g in pairs])
    ase = np.mean([1.0 - aligned_iou((p.size_x, p.size_y), (g.size_x, g.size_y)) for p, g in pairs])
    aoe = np.mean([abs(wrap_angle(p.yaw - g.yaw)) for p, g in pairs])
    return {"ate": float(ate), "ase": float(ase), "aoe": float(aoe), "num_matches": len(pairs)}


def compute_composite(m) -> float:
    """Recompute the composite from a report (or dict) with map, ate, ase,
    aoe and grid_diagonal."""
    get = (lambda k: m[k]) if isinstance(m, dict) else (lambda k: getattr(m, k))
    ate_n = get("ate") / (get("grid_diagonal") / 10.0)
    aoe_n = get("aoe") / math.pi
    errs = (ate_n, get("ase"), aoe_n)
    return (4.0 * get("map") + sum(1.0 - min(1.0, e) for e in errs)) / 7.0


def evaluate(preds, gts, grid: tuple[int, int], num_classes: int | None = None, **meta) -> MetricsReport:
    diag = math.hypot(*grid)
    res = compute_map(preds, gts, num_classes=num_classes)
    errs = tp_errors(res["tp_pairs"], diag)
    return MetricsReport(map=res["map"], per_class_ap=res["per_class_ap"], ate=errs["ate"], ase=errs["ase"],
                         aoe=errs["aoe"], grid_diagonal=diag, num_matches=errs["num_matches"], **meta)
