"""COCO-style detection metrics for boxes and instance masks.

Follows the standard COCO protocol restricted to the "all areas" range:
per image and class, detections are sorted by score (stable), truncated to
``max_dets`` and greedily matched to the unmatched ground truth with the
highest IoU at each threshold in 0.50:0.05:0.95. Precision is read off the
interpolated precision/recall curve at 101 recall points. Classes without any
ground truth instance are left out of the averages, so detections naming such a
class are false positives that cannot change the result.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from adaptdet.metrics import rle as rlemod

IOU_THRESHOLDS = np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1)
RECALL_POINTS = np.linspace(0.0, 1.0, int(np.round(1.0 / 0.01)) + 1)
MAX_DETS = 100


@dataclass(frozen=True)
class TaskMetrics:
    mAP: float
    AP50: float
    AP75: float
    AR: float

    def row(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class DetectionReport:
    bbox: TaskMetrics
    segm: TaskMetrics
    num_images: int

    def to_dict(self) -> dict:
        return {"bbox": self.bbox.row(), "segm": self.segm.row(), "num_images": self.num_images}


@dataclass(frozen=True)
class _Det:
    object_id: str
    score: float
    bbox: tuple
    rle: dict


def _as_det(d) -> _Det:
    if hasattr(d, "proposal"):  # detector.Detection
        return _Det(d.matched_object_id, float(d.score), tuple(d.proposal.bbox), rlemod.encode(d.proposal.mask))
    return _Det(d.object_id, float(d.score), tuple(d.bbox), d.rle)


def _match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy matching; returns a bool vector of matched detections."""
    n_det, n_gt = ious.shape
    gt_taken = np.zeros(n_gt, dtype=bool)
    matched = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in range(n_gt):
            if gt_taken[g] or ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m >= 0:
            gt_taken[m] = True
            matched[d] = True
    return matched


def _precision_at_recall(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> tuple[np.ndarray, float]:
    tp_sum = np.cumsum(tp, dtype=np.float64)
    fp_sum = np.cumsum(fp, dtype=np.float64)
    q = np.zeros(RECALL_POINTS.size)
    if tp_sum.size == 0:
        return q, 0.0
    rc = tp_sum / n_gt
    # tp + fp >= 1 at every position, so no epsilon guard is needed and a
    # perfect ranking yields precision exactly 1.0
    pr = tp_sum / (tp_sum + fp_sum)
    # make precision monotonically non-increasing from the right
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    valid = idx < pr.size
    q[valid] = pr[idx[valid]]
    return q, float(rc[-1])


def _evaluate_task(per_image: list[tuple[list, list[_Det]]], iou_fn) -> TaskMetrics:
    classes = sorted({g[0] for gts, _ in per_image for g in gts} | {d.object_id for _, dets in per_image for d in dets})
    n_thr = IOU_THRESHOLDS.size
    ap = []  # (class, threshold) mean precision
    ar = []
    for cls in classes:
        scores: list[float] = []
        matched: list[np.ndarray] = []
        n_gt = 0
        for gts, dets in per_image:
            g = [x[1] for x in gts if x[0] == cls]
            ds = [d for d in dets if d.object_id == cls]
            order = sorted(range(len(ds)), key=lambda i: -ds[i].score)[:MAX_DETS]
            ds = [ds[i] for i in order]
            n_gt += len(g)
            if not ds:
                continue
            ious = np.array([[iou_fn(d, gt) for gt in g] for d in ds]).reshape(len(ds), len(g))
            scores.extend(d.score for d in ds)
            matched.append(np.stack([_match(ious, t) for t in IOU_THRESHOLDS]))
        if n_gt == 0:
            continue
        if scores:
            order = np.argsort(-np.asarray(scores), kind="mergesort")
            m = np.concatenate(matched, axis=1)[:, order]
        else:
            m = np.zeros((n_thr, 0), dtype=bool)
        for t in range(n_thr):
            q, recall = _precision_at_recall(m[t], ~m[t], n_gt)
            ap.append((t, float(q.mean())))
            ar.append(recall)
    if not ap:
        return TaskMetrics(0.0, 0.0, 0.0, 0.0)
    t_idx = np.array([t for t, _ in ap])
    vals = np.array([v for _, v in ap])
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return TaskMetrics(
        mAP=float(vals.mean()),
        AP50=float(vals[t_idx == 0].mean()),
        AP75=float(vals[t_idx == i75].mean()),
        AR=float(np.mean(ar)),
    )


def coco_evaluate(detections: Mapping[str, Sequence], ground_truth: Sequence) -> DetectionReport:
    """Box and mask AP/AR of ``detections`` (image id -> detections or records)
    against annotated scenes."""
    gt_by_id = {s.image_id: s for s in ground_truth}
    unknown = set(detections) - set(gt_by_id)
    if unknown:
        raise ValueError(f"detections for images without ground truth: {sorted(unknown)[:5]}")
    box_items = []
    mask_items = []
    for image_id in sorted(gt_by_id):
        scene = gt_by_id[image_id]
        dets = [_as_det(d) for d in detections.get(image_id, ())]
        box_items.append(([(a.object_id, tuple(a.bbox)) for a in scene.annotations], dets))
        mask_items.append(([(a.object_id, rlemod.encode(a.mask)) for a in scene.annotations], dets))
    bbox = _evaluate_task(box_items, lambda d, g: rlemod.box_iou(d.bbox, g))
    segm = _evaluate_task(mask_items, lambda d, g: rlemod.rle_iou(d.rle, g))
    return DetectionReport(bbox, segm, len(gt_by_id))
