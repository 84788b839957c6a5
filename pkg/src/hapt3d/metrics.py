"""Evaluation metrics: per-class IoU / mIoU, panoptic quality over all five
classes (PQ), single-class tree panoptic quality (PQ_T), and their mean
mPQ = (PQ + PQ_T) / 2.

Counts accumulate across clouds before the final division, so merging
per-cloud partial results is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import CLASS_NAMES, NUM_CLASSES, STUFF_CLASSES, THING_CLASSES, LabeledCloud
from .cluster import InstancePrediction

_IOU_MATCH = 0.5  # segments match when IoU strictly exceeds this


@dataclass
class PanopticReport:
    iou: np.ndarray  # K, nan where the class is absent on both sides
    miou: float
    pq_class: np.ndarray  # K, nan where absent on both sides
    sq_class: np.ndarray
    rq_class: np.ndarray
    pq: float
    pq_tree: float
    mpq: float
    counts: dict

    def as_keyvalues(self) -> str:
        lines = []
        for k, name in enumerate(CLASS_NAMES):
            if not np.isnan(self.iou[k]):
                lines.append(f"iou.{name} = {self.iou[k]:.6f}")
        lines.append(f"miou = {self.miou:.6f}")
        for k, name in enumerate(CLASS_NAMES):
            if not np.isnan(self.pq_class[k]):
                lines.append(f"pq.{name} = {self.pq_class[k]:.6f}")
        lines.append(f"pq = {self.pq:.6f}")
        lines.append(f"pq_t = {self.pq_tree:.6f}")
        lines.append(f"mpq = {self.mpq:.6f}")
        for key, val in sorted(self.counts.items()):
            lines.append(f"counts.{key} = {val}")
        return "\n".join(lines) + "\n"

    def as_table(self) -> str:
        header = f"{'class':<8} {'IoU':>7} {'PQ':>7} {'SQ':>7} {'RQ':>7}"
        rows = [header, "-" * len(header)]
        for k, name in enumerate(CLASS_NAMES):
            def fmt(x):
                return "    -  " if np.isnan(x) else f"{x:7.3f}"
            rows.append(
                f"{name:<8} {fmt(self.iou[k])} {fmt(self.pq_class[k])} "
                f"{fmt(self.sq_class[k])} {fmt(self.rq_class[k])}"
            )
        rows.append("-" * len(header))
        rows.append(
            f"mIoU {self.miou:.3f}  PQ {self.pq:.3f}  "
            f"PQ_T {self.pq_tree:.3f}  mPQ {self.mpq:.3f}"
        )
        return "\n".join(rows)


# -- semantic IoU ----------------------------------------------------------------


def miou(pred_sem, gt_sem, k: int = NUM_CLASSES):
    """Per-class intersection over union and its mean; classes absent from
    both prediction and ground truth are excluded from the mean."""
    pred_sem = np.asarray(pred_sem)
    gt_sem = np.asarray(gt_sem)
    if len(pred_sem) == 0:
        raise ValueError("mIoU over zero points")
    if pred_sem.shape != gt_sem.shape:
        raise ValueError("label arrays differ in length")
    if pred_sem.min() < 0 or pred_sem.max() >= k or gt_sem.min() < 0 or gt_sem.max() >= k:
        raise ValueError("labels out of range")
    tp = np.array([np.sum((pred_sem == c) & (gt_sem == c)) for c in range(k)])
    fp = np.array([np.sum((pred_sem == c) & (gt_sem != c)) for c in range(k)])
    fn = np.array([np.sum((pred_sem != c) & (gt_sem == c)) for c in range(k)])
    return _iou_from_counts(tp, fp, fn)


def _iou_from_counts(tp, fp, fn):
    iou = np.full(len(tp), np.nan)
    present = (tp + fp + fn) > 0
    iou[present] = tp[present] / (tp + fp + fn)[present]
    mean = float(np.nanmean(iou)) if present.any() else 0.0
    return iou, mean


# -- panoptic quality ---------------------------------------------------------------


def _check_disjoint(segments, side: str):
    total = sum(len(idx) for _, idx in segments)
    if total:
        union = np.unique(np.concatenate([np.asarray(idx) for _, idx in segments]))
        if len(union) != total:
            raise ValueError(f"overlapping {side} segments within one task level")


def _match_segments(pred, gt):
    """Unique IoU > 0.5 matches; returns (tp, fp, fn, iou_sum)."""
    matched_pred = set()
    matched_gt = set()
    iou_sum = 0.0
    for gi, (_, g_idx) in enumerate(gt):
        g_set = np.asarray(g_idx)
        for pi, (_, p_idx) in enumerate(pred):
            if pi in matched_pred:
                continue
            inter = len(np.intersect1d(g_set, p_idx, assume_unique=True))
            if inter == 0:
                continue
            iou = inter / (len(g_set) + len(p_idx) - inter)
            if iou > _IOU_MATCH:
                matched_pred.add(pi)
                matched_gt.add(gi)
                iou_sum += iou
                break
    tp = len(matched_gt)
    return tp, len(pred) - tp, len(gt) - tp, iou_sum


def panoptic_quality(pred_segments, gt_segments, k: int = NUM_CLASSES):
    """Per-class PQ/SQ/RQ from (class, point-index) segments, plus the mean
    PQ over classes present on either side."""
    _check_disjoint(pred_segments, "prediction")
    _check_disjoint(gt_segments, "ground-truth")
    counts = np.zeros((k, 3))  # tp, fp, fn
    iou_sum = np.zeros(k)
    for c in range(k):
        pred_c = [s for s in pred_segments if s[0] == c]
        gt_c = [s for s in gt_segments if s[0] == c]
        tp, fp, fn, isum = _match_segments(pred_c, gt_c)
        counts[c] = (tp, fp, fn)
        iou_sum[c] = isum
    return _pq_from_counts(counts, iou_sum)


def _pq_from_counts(counts, iou_sum):
    k = len(counts)
    pq = np.full(k, np.nan)
    sq = np.full(k, np.nan)
    rq = np.full(k, np.nan)
    for c in range(k):
        tp, fp, fn = counts[c]
        if tp + fp + fn == 0:
            continue
        denom = tp + 0.5 * fp + 0.5 * fn
        pq[c] = iou_sum[c] / denom if denom else 0.0
        sq[c] = iou_sum[c] / tp if tp else 0.0
        rq[c] = tp / denom if denom else 0.0
    present = ~np.isnan(pq)
    mean_pq = float(pq[present].mean()) if present.any() else 0.0
    return pq, sq, rq, mean_pq


def _tree_segments(labels):
    labels = np.asarray(labels)
    return [(0, np.flatnonzero(labels == lab)) for lab in np.unique(labels[labels >= 0])]


def pq_tree(pred_tree_labels, gt_tree_ids) -> float:
    """Single-class panoptic quality where a segment is one tree: a trunk
    together with all its apples. Both sides empty scores 1 by convention;
    exactly one side empty scores 0."""
    pred = _tree_segments(pred_tree_labels)
    gt = _tree_segments(gt_tree_ids)
    if not pred and not gt:
        return 1.0
    tp, fp, fn, iou_sum = _match_segments(pred, gt)
    return iou_sum / (tp + 0.5 * fp + 0.5 * fn)


# -- dataset-level accumulation --------------------------------------------------------


def segments_from_labels(semantic, instance_labels) -> list:
    """Panoptic segments of one cloud: one segment per thing instance
    (noise points belong to no segment), one segment per populated stuff
    class."""
    semantic = np.asarray(semantic)
    instance_labels = np.asarray(instance_labels)
    segments = []
    for c in STUFF_CLASSES:
        idx = np.flatnonzero(semantic == c)
        if len(idx):
            segments.append((int(c), idx))
    for lab in np.unique(instance_labels[instance_labels >= 0]):
        idx = np.flatnonzero(instance_labels == lab)
        cls = np.unique(semantic[idx])
        if len(cls) != 1 or cls[0] not in THING_CLASSES:
            raise ValueError(f"instance {lab} is not a pure thing-class segment")
        segments.append((int(cls[0]), idx))
    return segments


@dataclass
class EvalAccumulator:
    """Sums TP/FP/FN (and matched IoU) across clouds; the division happens
    once at report time, so merge order does not matter."""

    k: int = NUM_CLASSES
    sem_counts: np.ndarray = None  # K x 3
    pq_counts: np.ndarray = None  # K x 3
    pq_iou: np.ndarray = None
    tree_counts: np.ndarray = None  # tp, fp, fn
    tree_iou: float = 0.0
    n_clouds: int = 0

    def __post_init__(self):
        if self.sem_counts is None:
            self.sem_counts = np.zeros((self.k, 3))
            self.pq_counts = np.zeros((self.k, 3))
            self.pq_iou = np.zeros(self.k)
            self.tree_counts = np.zeros(3)

    def add_cloud(self, pred: InstancePrediction, gt: LabeledCloud) -> None:
        pred_sem = np.asarray(pred.semantic)
        for c in range(self.k):
            self.sem_counts[c, 0] += np.sum((pred_sem == c) & (gt.semantic == c))
            self.sem_counts[c, 1] += np.sum((pred_sem == c) & (gt.semantic != c))
            self.sem_counts[c, 2] += np.sum((pred_sem != c) & (gt.semantic == c))

        pred_segments = segments_from_labels(pred_sem, pred.instance_label)
        gt_segments = segments_from_labels(gt.semantic, gt.instance_id)
        for c in range(self.k):
            tp, fp, fn, isum = _match_segments(
                [s for s in pred_segments if s[0] == c],
                [s for s in gt_segments if s[0] == c],
            )
            self.pq_counts[c] += (tp, fp, fn)
            self.pq_iou[c] += isum

        tp, fp, fn, isum = _match_segments(
            _tree_segments(pred.tree_label), _tree_segments(gt.tree_id)
        )
        self.tree_counts += (tp, fp, fn)
        self.tree_iou += isum
        self.n_clouds += 1

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        self.sem_counts += other.sem_counts
        self.pq_counts += other.pq_counts
        self.pq_iou += other.pq_iou
        self.tree_counts += other.tree_counts
        self.tree_iou += other.tree_iou
        self.n_clouds += other.n_clouds
        return self

    def report(self) -> PanopticReport:
        iou, mean_iou = _iou_from_counts(
            self.sem_counts[:, 0], self.sem_counts[:, 1], self.sem_counts[:, 2]
        )
        pq, sq, rq, mean_pq = _pq_from_counts(self.pq_counts, self.pq_iou)
        tp, fp, fn = self.tree_counts
        if tp + fp + fn == 0:
            tree_q = 1.0
        else:
            tree_q = self.tree_iou / (tp + 0.5 * fp + 0.5 * fn)
        counts = {}
        for c, name in enumerate(CLASS_NAMES):
            counts[f"{name}.tp"] = int(self.pq_counts[c, 0])
            counts[f"{name}.fp"] = int(self.pq_counts[c, 1])
            counts[f"{name}.fn"] = int(self.pq_counts[c, 2])
        counts["tree.tp"] = int(tp)
        counts["tree.fp"] = int(fp)
        counts["tree.fn"] = int(fn)
        return PanopticReport(
            iou=iou,
            miou=mean_iou,
            pq_class=pq,
            sq_class=sq,
            rq_class=rq,
            pq=mean_pq,
            pq_tree=float(tree_q),
            mpq=(mean_pq + float(tree_q)) / 2.0,
            counts=counts,
        )


def evaluate_clouds(pairs) -> PanopticReport:
    """Aggregate metrics over (InstancePrediction, LabeledCloud) pairs."""
    acc = EvalAccumulator()
    for pred, gt in pairs:
        acc.add_cloud(pred, gt)
    return acc.report()
