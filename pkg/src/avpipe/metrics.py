"""Detections container and the IoU-based accuracy proxy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIT_IOU = 0.5


@dataclass(frozen=True)
class FrameDetections:
    """Per-frame detections: boxes (n, 4) as (y0, x0, y1, x1), scores, labels."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size == 0 and boxes.shape[0] > 0:
            labels = np.zeros(boxes.shape[0], dtype=np.int64)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.boxes.shape[0]


def detections_equal(a: FrameDetections, b: FrameDetections) -> bool:
    return (
        np.array_equal(a.boxes, b.boxes)
        and np.array_equal(a.scores, b.scores)
        and np.array_equal(a.labels, b.labels)
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    y0 = np.maximum(a[:, None, 0], b[None, :, 0])
    x0 = np.maximum(a[:, None, 1], b[None, :, 1])
    y1 = np.minimum(a[:, None, 2], b[None, :, 2])
    x1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(y1 - y0, 0.0, None) * np.clip(x1 - x0, 0.0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def best_iou_per_gt(dets: FrameDetections, gt_boxes: np.ndarray) -> np.ndarray:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return np.zeros(0)
    if len(dets) == 0:
        return np.zeros(gt_boxes.shape[0])
    return iou_matrix(gt_boxes, dets.boxes).max(axis=1)


def frame_hit_rate(dets: FrameDetections, gt_boxes, threshold: float = HIT_IOU) -> float:
    """Fraction of ground-truth boxes matched at the IoU threshold.

    Frames with no ground truth score 1.0 (nothing to miss).
    """
    best = best_iou_per_gt(dets, gt_boxes)
    if best.size == 0:
        return 1.0
    return float(np.count_nonzero(best >= threshold)) / best.size


def frame_mean_best_iou(dets: FrameDetections, gt_boxes) -> float:
    """Mean best-match IoU over ground-truth boxes; continuous frame score."""
    best = best_iou_per_gt(dets, gt_boxes)
    if best.size == 0:
        return 1.0
    return float(best.mean())


def sequence_accuracy_proxy(
    detections, gt_boxes_per_frame, threshold: float = HIT_IOU
) -> float:
    """Hit-rate over all ground-truth objects of a sequence (micro average)."""
    hits = 0
    total = 0
    for dets, gt in zip(detections, gt_boxes_per_frame):
        best = best_iou_per_gt(dets, gt)
        hits += int(np.count_nonzero(best >= threshold))
        total += best.size
    if total == 0:
        return 1.0
    return hits / total
