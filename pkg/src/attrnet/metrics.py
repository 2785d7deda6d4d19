"""Detection and classification metrics: IoU, recall at a false-positive budget, ROC points."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Rect


def iou(a: Rect, b: Rect) -> float:
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    iw = min(a.right, b.right) - max(a.left, b.left)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    return inter / (a.area + b.area - inter)


@dataclass
class DetectionRecord:
    """Scored detections and ground-truth rects for one image."""

    detections: list = field(default_factory=list)  # [(Rect, score)]
    truths: list = field(default_factory=list)  # [Rect]
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        if self.height is not None and self.width is not None:
            for r in [d[0] for d in self.detections] + list(self.truths):
                if r.bottom > self.height or r.right > self.width:
                    raise ValueError(f"rect {r.as_list()} outside {self.height}x{self.width} image")


def match_detections(record: DetectionRecord, iou_min: float) -> list[tuple[float, bool]]:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched truth it overlaps most (ties to the
    earlier truth); it is a true positive when that overlap reaches ``iou_min``.
    Stable order keeps equal-score detections in their listed order.
    """
    order = sorted(range(len(record.detections)), key=lambda i: -record.detections[i][1])
    taken = [False] * len(record.truths)
    out = []
    for i in order:
        rect, score = record.detections[i]
        best, best_j = -1.0, -1
        for j, t in enumerate(record.truths):
            if taken[j]:
                continue
            o = iou(rect, t)
            if o > best:
                best, best_j = o, j
        hit = best_j >= 0 and best >= iou_min
        if hit:
            taken[best_j] = True
        out.append((float(score), hit))
    return out


def recall_at_fppi(records: Sequence[DetectionRecord], iou_min: float = 0.5, fppi: float = 0.1) -> float:
    """Best recall over score thresholds whose false positives per image stay within ``fppi``.

    Lowering the threshold only adds detections, so this is the recall at the
    lowest admissible threshold.  Matching is greedy by score, hence prefix
    consistent: one pass over all detections serves every threshold.
    """
    if not records:
        raise ValueError("no records")
    n_truth = sum(len(r.truths) for r in records)
    if n_truth == 0:
        return 0.0
    scored = [m for r in records for m in match_detections(r, iou_min)]
    if not scored:
        return 0.0
    scores = np.array([s for s, _ in scored])
    hits = np.array([h for _, h in scored], dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    # thresholds sit at distinct scores: keep the last index of each score group
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    ok = fp[last] <= fppi * len(records) + 1e-12
    if not ok.any():
        return 0.0
    return float(tp[last][ok].max() / n_truth)


def roc_points(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> list[tuple[float, float]]:
    """(false positive rate, true positive rate) for every distinct threshold, from (0, 0) up."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    tpr = (pos.size - np.searchsorted(pos_s, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg_s, thresholds, side="left")) / neg.size
    return [(0.0, 0.0)] + [(float(f), float(t)) for f, t in zip(fpr, tpr)]
