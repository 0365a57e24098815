"""Pyramid anchor generation and rotated-IoU label assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .featops import AnchorMap
from .geometry import OrientedBox, rotated_iou

NEGATIVE = -1
IGNORE = -2

DEFAULT_LEVELS = (("P3", 8), ("P4", 16), ("P5", 32), ("P6", 64), ("P7", 128))


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[tuple[str, int], ...] = DEFAULT_LEVELS
    scale: float = 4.0

    def __post_init__(self):
        strides = [s for _, s in self.levels]
        if not strides:
            raise ValueError("pyramid needs at least one level")
        for s in strides:
            if s < 1 or s & (s - 1):
                raise ValueError(f"stride {s} is not a power of two")
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        if self.scale <= 0:
            raise ValueError("anchor scale must be positive")

    @property
    def strides(self) -> list[int]:
        return [s for _, s in self.levels]

    def anchor_sizes(self) -> list[float]:
        return [self.scale * s for s in self.strides]


def generate_anchors(spec: PyramidSpec, grid_sizes: Sequence[tuple[int, int]]) -> list[AnchorMap]:
    """One square, horizontal anchor per location of every pyramid level.

    The anchor at ``(i, j)`` of a stride-``S`` level is centred on
    ``(S (j + 0.5), S (i + 0.5))`` with side ``scale * S``.
    """
    if len(grid_sizes) != len(spec.levels):
        raise ValueError(f"{len(grid_sizes)} grid sizes for {len(spec.levels)} levels")
    maps = []
    for (_, stride), (H, W) in zip(spec.levels, grid_sizes):
        if H < 1 or W < 1:
            raise ValueError(f"grid size must be positive, got {(H, W)}")
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        side = spec.scale * stride
        boxes = np.stack(
            [
                stride * (jj + 0.5),
                stride * (ii + 0.5),
                np.full(ii.shape, side),
                np.full(ii.shape, side),
                np.zeros(ii.shape),
            ],
            axis=-1,
        ).astype(np.float64)
        maps.append(AnchorMap(boxes, stride))
    return maps


@dataclass
class Assignment:
    """Per-anchor labels: a gt index (positive), ``NEGATIVE`` or ``IGNORE``."""

    labels: np.ndarray
    max_iou: np.ndarray
    num_gts: int = 0
    rescued: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    def counts(self) -> tuple[int, int, int]:
        return int(self.positive.sum()), int(self.negative.sum()), int(self.ignored.sum())


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 5).astype(np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 5)


def iou_table(anchors, gts) -> np.ndarray:
    """Dense ``(n_anchors, n_gts)`` rotated-IoU matrix.

    Pairs whose circumscribed circles are apart are skipped without
    clipping.
    """
    a = _as_box_array(anchors)
    g = _as_box_array(gts)
    out = np.zeros((len(a), len(g)))
    if not len(a) or not len(g):
        return out
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    a_boxes = [None] * len(a)
    for j, row in enumerate(g):
        gb = OrientedBox.from_array(row)
        reach = ra + 0.5 * math.hypot(row[2], row[3])
        near = np.flatnonzero(np.hypot(a[:, 0] - row[0], a[:, 1] - row[1]) <= reach)
        for i in near:
            if a_boxes[i] is None:
                a_boxes[i] = OrientedBox.from_array(a[i])
            out[i, j] = rotated_iou(a_boxes[i], gb)
    return out


def assign(
    anchors,
    gts,
    fg: float = 0.5,
    bg: float = 0.4,
    rescue_low_quality: bool = True,
    ious: np.ndarray | None = None,
) -> Assignment:
    """Label anchors against ground truth by rotated IoU.

    Positive when the best IoU is at least ``fg`` (matched to the best gt,
    lowest gt index on ties), negative below ``bg``, ignored in between.
    With ``rescue_low_quality`` every gt left without a positive claims its
    highest-IoU anchor (IoU > 0) that is not the only positive of another gt.
    """
    if fg < bg:
        raise ValueError(f"foreground threshold {fg} below background threshold {bg}")
    a = _as_box_array(anchors)
    g = _as_box_array(gts)
    n = len(a)
    if ious is None:
        ious = iou_table(a, g)
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), np.zeros(0), len(g), np.zeros(0, dtype=bool))
    if len(g) == 0:
        return Assignment(np.full(n, NEGATIVE, dtype=np.int64), np.zeros(n), 0, np.zeros(n, dtype=bool))

    best_gt = np.argmax(ious, axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[max_iou < bg] = NEGATIVE
    pos = max_iou >= fg
    labels[pos] = best_gt[pos]
    rescued = np.zeros(n, dtype=bool)

    if rescue_low_quality:
        counts = np.bincount(labels[labels >= 0], minlength=len(g))
        for j in range(len(g)):
            if counts[j] > 0:
                continue
            col = ious[:, j]
            # descending IoU, lowest anchor index first on ties
            for i in np.lexsort((np.arange(n), -col)):
                if col[i] <= 0:
                    break
                owner = labels[i]
                if owner >= 0 and counts[owner] <= 1:
                    continue
                if owner >= 0:
                    counts[owner] -= 1
                labels[i] = j
                counts[j] += 1
                rescued[i] = True
                break
    return Assignment(labels, max_iou, len(g), rescued)
