"""Oriented boxes, quads, and rotated IoU by convex polygon clipping.

Box convention: ``(cx, cy, w, h, theta)`` with ``w`` the long side and
``theta`` the angle of the long side measured from the +x axis.  The long
side points along ``(cos theta, -sin theta)`` and the short side along
``(sin theta, cos theta)``, i.e. a local offset ``(a, b)`` maps to image
coordinates through ``R(theta) = [[cos, sin], [-sin, cos]]``.  Canonical
angles live in the half-open interval ``[-pi/4, 3pi/4)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidBoxError, ZeroAreaError

PI = math.pi
ANGLE_MIN = -PI / 4
ANGLE_MAX = 3 * PI / 4

# relative to the larger box's long side
MERGE_TOL = 1e-9
# relative to the squared long side
AREA_TOL = 1e-12


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidBoxError(f"non-finite {name}: {getattr(self, name)!r}")

    @classmethod
    def from_array(cls, row) -> "OrientedBox":
        cx, cy, w, h, t = (float(v) for v in row)
        return cls(cx, cy, w, h, t)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> list[tuple[float, float]]:
        return _corners(self.cx, self.cy, self.w, self.h, self.theta)

    def translated(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(self.cx + dx, self.cy + dy, self.w, self.h, self.theta)


@dataclass(frozen=True)
class Quad:
    """Four corners with positive signed (shoelace) area."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) != 4:
            raise ValueError(f"a quad needs exactly 4 vertices, got {len(self.points)}")
        pts = tuple((float(x), float(y)) for x, y in self.points)
        for x, y in pts:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InvalidBoxError(f"non-finite quad vertex ({x}, {y})")
        if signed_area(pts) < 0:
            pts = (pts[0], pts[3], pts[2], pts[1])
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> "Quad":
        if len(coords) != 8:
            raise ValueError(f"expected 8 coordinates, got {len(coords)}")
        return cls(tuple((coords[2 * i], coords[2 * i + 1]) for i in range(4)))

    def flat(self) -> list[float]:
        return [c for p in self.points for c in p]

    @property
    def area(self) -> float:
        return signed_area(self.points)


def wrap_angle(theta: float) -> float:
    """Map an angle into ``[-pi/4, 3pi/4)`` modulo pi.

    Angles already in range are returned untouched, so the map is exactly
    idempotent.
    """
    if ANGLE_MIN <= theta < ANGLE_MAX:
        return theta
    t = (theta - ANGLE_MIN) % PI + ANGLE_MIN
    if t >= ANGLE_MAX:
        t -= PI
    if t < ANGLE_MIN:
        t = ANGLE_MIN
    return t


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=np.float64)
    inside = (theta >= ANGLE_MIN) & (theta < ANGLE_MAX)
    t = np.mod(theta - ANGLE_MIN, PI) + ANGLE_MIN
    t = np.where(t >= ANGLE_MAX, t - PI, t)
    t = np.maximum(t, ANGLE_MIN)
    return np.where(inside, theta, t)


def canonicalize(box: OrientedBox) -> OrientedBox:
    """Return the equivalent box with ``w >= h`` and theta in ``[-pi/4, 3pi/4)``."""
    if not (box.w > 0 and box.h > 0):
        raise InvalidBoxError(f"box sides must be positive, got w={box.w}, h={box.h}")
    w, h, t = box.w, box.h, box.theta
    if w < h:
        w, h, t = h, w, t + PI / 2
    t = wrap_angle(t)
    if (w, h, t) == (box.w, box.h, box.theta):
        return box
    return OrientedBox(box.cx, box.cy, w, h, t)


def canonicalize_array(boxes: np.ndarray) -> np.ndarray:
    """Canonicalize an ``(..., 5)`` array of boxes."""
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    w, h = boxes[..., 2], boxes[..., 3]
    if not np.all(np.isfinite(boxes)):
        raise InvalidBoxError("non-finite box field")
    if np.any(w <= 0) or np.any(h <= 0):
        raise InvalidBoxError("box sides must be positive")
    swap = w < h
    out = boxes.copy()
    out[..., 2] = np.where(swap, h, w)
    out[..., 3] = np.where(swap, w, h)
    out[..., 4] = wrap_angles(np.where(swap, boxes[..., 4] + PI / 2, boxes[..., 4]))
    return out


def _corners(cx, cy, w, h, theta):
    c, s = math.cos(theta), math.sin(theta)
    hw, hh = w / 2, h / 2
    # local (a, b) -> (cx + a c + b s, cy - a s + b c)
    return [
        (cx + a * c + b * s, cy - a * s + b * c)
        for a, b in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    ]


def box_to_quad(box: OrientedBox) -> Quad:
    return Quad(tuple(box.corners()))


def boxes_to_corners(boxes: np.ndarray) -> np.ndarray:
    """Corners of an ``(n, 5)`` box array as ``(n, 4, 2)``, same order as :func:`box_to_quad`."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h, t = (boxes[..., i] for i in range(5))
    c, s = np.cos(t), np.sin(t)
    a = np.array([-0.5, 0.5, 0.5, -0.5])
    b = np.array([-0.5, -0.5, 0.5, 0.5])
    la = w[..., None] * a
    lb = h[..., None] * b
    x = cx[..., None] + la * c[..., None] + lb * s[..., None]
    y = cy[..., None] - la * s[..., None] + lb * c[..., None]
    return np.stack([x, y], axis=-1)


def signed_area(points: Sequence[tuple[float, float]]) -> float:
    """Shoelace formula; positive for counter-clockwise in (x, y) axes."""
    n = len(points)
    acc = 0.0
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def convex_hull(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def min_area_rect(points: Iterable[tuple[float, float]]) -> OrientedBox:
    """Minimum-area enclosing rectangle by rotating calipers over the hull."""
    pts = list(points)
    hull = convex_hull(pts)
    span = max((max(abs(x), abs(y)) for x, y in pts), default=0.0) or 1.0
    if len(hull) < 3 or signed_area(hull) <= AREA_TOL * span * span:
        raise ZeroAreaError("points are collinear or coincident")

    best = None
    n = len(hull)
    for i in range(n):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        norm = math.hypot(ex, ey)
        if norm == 0:
            continue
        ex, ey = ex / norm, ey / norm
        # project onto (e, n) with n = e rotated by +90 deg
        us = [x * ex + y * ey for x, y in hull]
        vs = [-x * ey + y * ex for x, y in hull]
        umin, umax, vmin, vmax = min(us), max(us), min(vs), max(vs)
        area = (umax - umin) * (vmax - vmin)
        if best is None or area < best[0]:
            best = (area, ex, ey, umin, umax, vmin, vmax)

    _, ex, ey, umin, umax, vmin, vmax = best
    uc, vc = (umin + umax) / 2, (vmin + vmax) / 2
    cx = uc * ex - vc * ey
    cy = uc * ey + vc * ex
    theta = math.atan2(-ey, ex)
    return canonicalize(OrientedBox(cx, cy, umax - umin, vmax - vmin, theta))


def quad_to_box(q: Quad) -> OrientedBox:
    return min_area_rect(q.points)


def axis_aligned_hull(box: OrientedBox) -> tuple[float, float, float, float]:
    xs, ys = zip(*box.corners())
    return (min(xs), min(ys), max(xs), max(ys))


def rotate_box(box: OrientedBox, angle: float, origin=(0.0, 0.0)) -> OrientedBox:
    """Rigidly rotate a box by ``angle`` (in the box-angle sense) about ``origin``."""
    c, s = math.cos(angle), math.sin(angle)
    ox, oy = origin
    dx, dy = box.cx - ox, box.cy - oy
    return OrientedBox(ox + c * dx + s * dy, oy - s * dx + c * dy, box.w, box.h, box.theta + angle)


def clip_convex(subject, clip, tol=0.0):
    """Clip a convex polygon by a counter-clockwise convex polygon.

    Sutherland-Hodgman; both inputs are vertex lists.  Vertices within ``tol``
    of their predecessor are merged.
    """
    out = list(subject)
    m = len(clip)
    for i in range(m):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        px, py = inp[-1]
        pd = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inp:
            qd = ex * (qy - ay) - ey * (qx - ax)
            if qd >= 0:
                if pd < 0:
                    t = pd / (pd - qd)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif pd >= 0:
                t = pd / (pd - qd)
                out.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, pd = qx, qy, qd
        if tol > 0 and len(out) > 1:
            out = _merge_close(out, tol)
    return out


def _merge_close(poly, tol):
    merged = [poly[0]]
    for p in poly[1:]:
        q = merged[-1]
        if abs(p[0] - q[0]) > tol or abs(p[1] - q[1]) > tol:
            merged.append(p)
    while len(merged) > 1:
        p, q = merged[-1], merged[0]
        if abs(p[0] - q[0]) > tol or abs(p[1] - q[1]) > tol:
            break
        merged.pop()
    return merged


def intersection_polygon(a: OrientedBox, b: OrientedBox) -> list[tuple[float, float]]:
    """Vertices of ``a`` intersected with ``b`` (empty list when they miss)."""
    scale = max(a.w, a.h, b.w, b.h)
    poly = clip_convex(a.corners(), b.corners(), tol=MERGE_TOL * scale)
    if len(poly) < 3 or abs(signed_area(poly)) < AREA_TOL * scale * scale:
        return []
    return poly


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    poly = intersection_polygon(a, b)
    return abs(signed_area(poly)) if poly else 0.0


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes.

    Zero-area operands give 0.0.  The operands are put in a fixed order before
    clipping so that ``rotated_iou(a, b) == rotated_iou(b, a)`` bit for bit.
    """
    area_a, area_b = a.w * a.h, b.w * b.h
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if a == b:
        return 1.0
    if b.as_tuple() < a.as_tuple():
        a, b = b, a
        area_a, area_b = area_b, area_a
    inter = intersection_area(a, b)
    if inter <= 0:
        return 0.0
    union = area_a + area_b - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[OrientedBox], boxes_b: Sequence[OrientedBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out
