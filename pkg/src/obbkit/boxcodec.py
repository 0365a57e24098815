"""Regression-target encoding between anchors and oriented boxes.

Offsets of the centre are expressed in the anchor's rotated frame and
normalised by the anchor sides; sides are log ratios; the angle difference
is wrapped into ``[-pi/4, 3pi/4)`` and divided by pi.  The same coder serves
horizontal anchors (theta = 0) and refined rotated anchors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidAnchorError, InvalidBoxError
from .geometry import PI, OrientedBox, canonicalize, canonicalize_array, wrap_angle, wrap_angles

DEFAULT_MAX_LOG_RATIO = 8.0


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float
    dtheta: float

    def as_tuple(self):
        return (self.dx, self.dy, self.dw, self.dh, self.dtheta)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "BoxDelta":
        return cls(*(float(v) for v in row))


def _angle_target(theta_gt, theta_anchor):
    num = wrap_angle(theta_gt - theta_anchor)
    dt = num / PI
    # num < 3pi/4 can still round to 0.75 after division
    if dt >= 0.75:
        dt -= 1.0
    return dt


def encode(gt: OrientedBox, anchor: OrientedBox) -> BoxDelta:
    if not (anchor.w > 0 and anchor.h > 0):
        raise InvalidAnchorError(f"anchor sides must be positive, got w={anchor.w}, h={anchor.h}")
    if not (gt.w > 0 and gt.h > 0):
        raise InvalidBoxError(f"gt sides must be positive, got w={gt.w}, h={gt.h}")
    c, s = math.cos(anchor.theta), math.sin(anchor.theta)
    ox, oy = gt.cx - anchor.cx, gt.cy - anchor.cy
    # row vector (ox, oy) times R(theta): projection onto the anchor axes
    return BoxDelta(
        (ox * c - oy * s) / anchor.w,
        (ox * s + oy * c) / anchor.h,
        math.log(gt.w) - math.log(anchor.w),
        math.log(gt.h) - math.log(anchor.h),
        _angle_target(gt.theta, anchor.theta),
    )


def decode(
    delta: BoxDelta,
    anchor: OrientedBox,
    max_log_ratio: float = DEFAULT_MAX_LOG_RATIO,
    return_clamped: bool = False,
):
    """Invert :func:`encode` and canonicalize the result.

    Side log-ratios beyond ``max_log_ratio`` are clamped.  With
    ``return_clamped=True`` a ``(box, clamped)`` pair is returned instead of
    the bare box.
    """
    if not (anchor.w > 0 and anchor.h > 0):
        raise InvalidAnchorError(f"anchor sides must be positive, got w={anchor.w}, h={anchor.h}")
    vals = delta.as_tuple()
    if not all(math.isfinite(v) for v in vals):
        raise InvalidBoxError(f"non-finite delta {vals}")
    dw = min(max(delta.dw, -max_log_ratio), max_log_ratio)
    dh = min(max(delta.dh, -max_log_ratio), max_log_ratio)
    clamped = dw != delta.dw or dh != delta.dh
    c, s = math.cos(anchor.theta), math.sin(anchor.theta)
    a, b = delta.dx * anchor.w, delta.dy * anchor.h
    box = canonicalize(
        OrientedBox(
            anchor.cx + a * c + b * s,
            anchor.cy - a * s + b * c,
            anchor.w * math.exp(dw),
            anchor.h * math.exp(dh),
            anchor.theta + PI * delta.dtheta,
        )
    )
    return (box, clamped) if return_clamped else box


def encode_array(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode` over ``(..., 5)`` arrays."""
    gts = np.asarray(gts, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(anchors[..., 2] <= 0) or np.any(anchors[..., 3] <= 0):
        raise InvalidAnchorError("anchor sides must be positive")
    if np.any(gts[..., 2] <= 0) or np.any(gts[..., 3] <= 0):
        raise InvalidBoxError("gt sides must be positive")
    c, s = np.cos(anchors[..., 4]), np.sin(anchors[..., 4])
    ox = gts[..., 0] - anchors[..., 0]
    oy = gts[..., 1] - anchors[..., 1]
    dt = wrap_angles(gts[..., 4] - anchors[..., 4]) / PI
    dt = np.where(dt >= 0.75, dt - 1.0, dt)
    return np.stack(
        [
            (ox * c - oy * s) / anchors[..., 2],
            (ox * s + oy * c) / anchors[..., 3],
            np.log(gts[..., 2]) - np.log(anchors[..., 2]),
            np.log(gts[..., 3]) - np.log(anchors[..., 3]),
            dt,
        ],
        axis=-1,
    )


def decode_array(
    deltas: np.ndarray, anchors: np.ndarray, max_log_ratio: float = DEFAULT_MAX_LOG_RATIO
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`decode`; returns ``(boxes, clamped_mask)``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(anchors[..., 2] <= 0) or np.any(anchors[..., 3] <= 0):
        raise InvalidAnchorError("anchor sides must be positive")
    if not np.all(np.isfinite(deltas)):
        raise InvalidBoxError("non-finite delta")
    dw = np.clip(deltas[..., 2], -max_log_ratio, max_log_ratio)
    dh = np.clip(deltas[..., 3], -max_log_ratio, max_log_ratio)
    clamped = (dw != deltas[..., 2]) | (dh != deltas[..., 3])
    c, s = np.cos(anchors[..., 4]), np.sin(anchors[..., 4])
    a = deltas[..., 0] * anchors[..., 2]
    b = deltas[..., 1] * anchors[..., 3]
    boxes = np.stack(
        [
            anchors[..., 0] + a * c + b * s,
            anchors[..., 1] - a * s + b * c,
            anchors[..., 2] * np.exp(dw),
            anchors[..., 3] * np.exp(dh),
            anchors[..., 4] + PI * deltas[..., 4],
        ],
        axis=-1,
    )
    return canonicalize_array(boxes), clamped
