"""Score filtering, top-k selection and greedy rotated NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from .geometry import OrientedBox, rotated_iou


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    class_id: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score!r}")
        if self.class_id < 0:
            raise ValueError(f"class id must be non-negative, got {self.class_id}")

    def with_box(self, box: OrientedBox) -> "Detection":
        return replace(self, box=box)


def rank_order(scores: Sequence[float]) -> list[int]:
    """Indices by descending score, lower index first on ties."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def select_topk(dets: Sequence[Detection], k: int = 2000, score_thr: float = 0.05) -> list[Detection]:
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    kept = [i for i in rank_order([d.score for d in dets]) if dets[i].score >= score_thr]
    return [dets[i] for i in kept[:k]]


def nms_indices(
    boxes: Sequence[OrientedBox],
    scores: Sequence[float],
    iou_thr: float = 0.5,
    classes: Sequence[int] | None = None,
) -> list[int]:
    """Greedy suppression; returns surviving indices in descending score order.

    A box is suppressed when its IoU with an already-kept box of the same
    class exceeds ``iou_thr``.  ``classes=None`` treats all boxes as one class.
    """
    if not 0.0 <= iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in [0, 1], got {iou_thr}")
    order = rank_order(scores)
    kept_by_class: dict = {}
    keep = []
    for i in order:
        cls = None if classes is None else classes[i]
        bucket = kept_by_class.setdefault(cls, [])
        if all(rotated_iou(boxes[j], boxes[i]) <= iou_thr for j in bucket):
            bucket.append(i)
            keep.append(i)
    return keep


def rotated_nms(dets: Sequence[Detection], iou_thr: float = 0.5, per_class: bool = True) -> list[Detection]:
    keep = nms_indices(
        [d.box for d in dets],
        [d.score for d in dets],
        iou_thr,
        [d.class_id for d in dets] if per_class else None,
    )
    return [dets[i] for i in keep]
