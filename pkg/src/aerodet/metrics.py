"""Detection evaluation: matching, confusion matrix, P/R/F1, OA/IoU/Kappa,
threshold-swept PR and F1 curves, and MS-COCO size bucketing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .slicing import Detection

SMALL_AREA_MAX = 32 * 32
MEDIUM_AREA_MAX = 96 * 96


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    bbox: Tuple[float, float, float, float]
    difficult: bool = False


@dataclass
class MatchSet:
    pairs: List[Tuple[Detection, GroundTruth, float]]  # (pred, gt, IoU)
    false_positives: List[Detection]
    false_negatives: List[GroundTruth]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # (K+1, K+1); row = ground truth, col = prediction
    class_names: Tuple[str, ...]  # length K; index K is background

    @property
    def num_classes(self):
        return len(self.class_names)


def iou_hbb(a: Tuple[float, float, float, float],
            b: Tuple[float, float, float, float]) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    if a[0] >= a[2] or a[1] >= a[3] or b[0] >= b[2] or b[1] >= b[3]:
        raise ContractError("invalid box")
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def match_detections(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float, same_class: bool = True,
                     ignore_difficult: bool = True) -> MatchSet:
    """Greedy one-to-one matching, predictions in score-descending order.

    Each prediction takes the highest-IoU unmatched ground truth at or
    above the threshold (ties broken by ground-truth index).  Unmatched
    difficult ground truths are excluded from the false negatives when
    ignore_difficult is set.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ContractError("iou_threshold must be in (0, 1]")
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].score, preds[i].bbox, preds[i].class_id, i))
    taken = [False] * len(gts)
    pairs = []
    fps = []
    for i in order:
        p = preds[i]
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j] or (same_class and g.class_id != p.class_id):
                continue
            v = iou_hbb(p.bbox, g.bbox)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((p, gts[best_j], best_iou))
        else:
            fps.append(p)
    fns = [g for j, g in enumerate(gts)
           if not taken[j] and not (ignore_difficult and g.difficult)]
    return MatchSet(pairs=pairs, false_positives=fps, false_negatives=fns)


def confusion_matrix(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float, class_names: Sequence[str]) -> ConfusionMatrix:
    """Class-agnostic re-matching so cross-class confusions are visible.

    Matched pair -> (gt_class, pred_class); unmatched prediction ->
    (background, pred_class); unmatched ground truth -> (gt_class, background).
    """
    K = len(class_names)
    ms = match_detections(preds, gts, iou_threshold, same_class=False,
                          ignore_difficult=False)
    counts = np.zeros((K + 1, K + 1), dtype=np.int64)
    for p, g, _ in ms.pairs:
        counts[g.class_id, p.class_id] += 1
    for p in ms.false_positives:
        counts[K, p.class_id] += 1
    for g in ms.false_negatives:
        counts[g.class_id, K] += 1
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


def precision_recall_f1(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    """Percent-scale precision, recall and F1, with 0/0 -> 0 conventions."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ContractError("counts must be non-negative")
    p = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def accuracy_iou_kappa(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    """Overall accuracy, mean per-class IoU, and Cohen's kappa in percent.

    Evaluated over the real-class block of the matrix; the background
    row/column contributes to per-class FP/FN via the off-diagonal cells.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    K = cm.num_classes
    trace = np.trace(counts[:K, :K])
    oa = 100.0 * trace / total

    ious = []
    for c in range(K):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        denom = tp + fp + fn
        if denom > 0:
            ious.append(tp / denom)
    miou = 100.0 * float(np.mean(ious)) if ious else 0.0

    p_o = trace / total
    row = counts.sum(axis=1) / total
    col = counts.sum(axis=0) / total
    p_e = float(row @ col)
    kc = 100.0 * (p_o - p_e) / (1.0 - p_e) if p_e < 1.0 else 100.0
    return oa, miou, kc


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    overall_accuracy: float
    iou: float
    kappa: float
    per_class: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)
    per_size: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)


def size_bucket(area: float) -> str:
    """MS-COCO convention: small <= 32^2 < medium <= 96^2 < large."""
    if area <= 0:
        raise ContractError("area must be positive")
    if area <= SMALL_AREA_MAX:
        return "small"
    if area <= MEDIUM_AREA_MAX:
        return "medium"
    return "large"


def evaluate(preds: Sequence[Detection], gts: Sequence[GroundTruth],
             iou_threshold: float, class_names: Sequence[str],
             per_class: bool = False, size_buckets: bool = False) -> MetricReport:
    """Aggregate report over a single image's (or pooled) detections."""
    ms = match_detections(preds, gts, iou_threshold)
    tp = len(ms.pairs)
    fp = len(ms.false_positives)
    fn = len(ms.false_negatives)
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    cm = confusion_matrix(preds, gts, iou_threshold, class_names)
    oa, miou, kc = accuracy_iou_kappa(cm)
    report = MetricReport(precision=round(p, 2), recall=round(r, 2), f1=round(f1, 2),
                          overall_accuracy=round(oa, 2), iou=round(miou, 2),
                          kappa=round(kc, 2))
    if per_class:
        for c, name in enumerate(class_names):
            ctp = sum(1 for pr, g, _ in ms.pairs if g.class_id == c)
            cfp = sum(1 for pr in ms.false_positives if pr.class_id == c)
            cfn = sum(1 for g in ms.false_negatives if g.class_id == c)
            report.per_class[name] = tuple(round(v, 2)
                                           for v in precision_recall_f1(ctp, cfp, cfn))
    if size_buckets:
        for bucket in ("small", "medium", "large"):
            btp = sum(1 for pr, g, _ in ms.pairs
                      if size_bucket(_area(g.bbox)) == bucket)
            bfn = sum(1 for g in ms.false_negatives
                      if size_bucket(_area(g.bbox)) == bucket)
            bfp = sum(1 for pr in ms.false_positives
                      if size_bucket(_area(pr.bbox)) == bucket)
            report.per_size[bucket] = tuple(round(v, 2)
                                            for v in precision_recall_f1(btp, bfp, bfn))
    return report


def _area(bbox):
    return (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])


def pr_f1_curves(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                 iou_threshold: float):
    """Threshold sweep over all distinct scores.

    Returns (rows, pr_points): rows of (threshold, precision, recall, f1)
    in ascending threshold order, and (recall, interpolated precision)
    pairs with the usual right-to-left precision envelope.
    """
    thresholds = sorted({p.score for p in preds})
    rows = []
    for th in thresholds:
        kept = [p for p in preds if p.score >= th]
        ms = match_detections(kept, gts, iou_threshold)
        p, r, f1 = precision_recall_f1(len(ms.pairs), len(ms.false_positives),
                                       len(ms.false_negatives))
        rows.append((th, p, r, f1))
    # PR pairs ordered by recall; envelope makes precision non-increasing
    pr = sorted(((r, p) for _, p, r, _ in rows))
    env = []
    best_p = 0.0
    for r, p in reversed(pr):
        best_p = max(best_p, p)
        env.append((r, best_p))
    env.reverse()
    return rows, env
