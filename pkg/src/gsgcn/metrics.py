"""Accuracy, confusion matrices and frame mAP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .skeleton import PoseDocument, iou

FMAP_THRESHOLDS = (0.5, 0.6, 0.75)


@dataclass(frozen=True)
class Detection:
    frame: Hashable
    bbox: tuple[float, float, float, float]
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"box {self.bbox} has non-positive area")
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


def accuracy(predicted: Sequence[int], true: Sequence[int]) -> float:
    predicted, true = np.asarray(predicted), np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {true.shape}")
    if predicted.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float((predicted == true).mean())


def confusion_matrix(predicted: Sequence[int], true: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(predicted)), 1)
    return cm


def precision_recall(detections: Sequence[Detection], ground_truths: Sequence[Detection],
                     iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision/recall after each detection in descending-score order."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    by_frame: dict[Hashable, list[int]] = {}
    for j, g in enumerate(ground_truths):
        by_frame.setdefault(g.frame, []).append(j)
    used: set[int] = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = detections[i]
        best, best_j = iou_threshold, None
        for j in by_frame.get(d.frame, ()):
            if j in used:
                continue
            v = iou(d.bbox, ground_truths[j].bbox)
            if v >= best and (best_j is None or v > best):
                best, best_j = v, j
        if best_j is not None:
            used.add(best_j)
            tp[rank] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / len(ground_truths) if ground_truths else np.zeros(len(order))
    return precision, recall


def frame_ap(detections: Sequence[Detection], ground_truths: Sequence[Detection],
             iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP for one class.

    No ground truths: 0 when there are detections, NaN (excluded from means) when there are none.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not ground_truths:
        return 0.0 if detections else float("nan")
    if not detections:
        return 0.0
    precision, recall = precision_recall(detections, ground_truths, iou_threshold)
    # precision envelope, non-increasing from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class FrameMAP:
    per_threshold: dict[float, float]
    per_class: dict[float, dict[int, float]]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_threshold.values())))

    def as_dict(self) -> dict:
        out = {f"f-mAP@{round(t * 100)}": v for t, v in self.per_threshold.items()}
        out["f-mAP@avg"] = self.average
        return out


def frame_map(detections: Sequence[Detection], ground_truths: Sequence[Detection],
              thresholds: Sequence[float] = FMAP_THRESHOLDS) -> FrameMAP:
    """Class-averaged frame AP at each IoU threshold, reported in percent."""
    classes = sorted({d.class_id for d in detections} | {g.class_id for g in ground_truths})
    dets = {c: [d for d in detections if d.class_id == c] for c in classes}
    gts = {c: [g for g in ground_truths if g.class_id == c] for c in classes}
    per_t, per_c = {}, {}
    for t in thresholds:
        aps = {c: frame_ap(dets[c], gts[c], t) for c in classes}
        aps = {c: v for c, v in aps.items() if not np.isnan(v)}
        per_c[t] = aps
        per_t[t] = 100.0 * float(np.mean(list(aps.values()))) if aps else 0.0
    return FrameMAP(per_t, per_c)


def detections_from_document(doc: PoseDocument, default_score: float = 1.0) -> list[Detection]:
    """Every labelled record of a pose file as a Detection keyed by (video_id, frame)."""
    out = []
    for t in doc.tracks:
        for f in t.frames:
            if f.action_label is None:
                continue
            score = f.score if f.score is not None else default_score
            out.append(Detection((t.video_id, f.frame_index), f.bbox, f.action_label, score))
    return out
