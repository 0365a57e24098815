"""Dense-grid reference convolution and anchor-guided alignment convolution.

Grids are ``(H, W, C)`` float64 arrays.  Points on a grid are ``(x, y)`` with
``x`` indexing columns and ``y`` rows; samples outside the grid read as zero.
Kernel taps ``r = (rx, ry)`` are ordered row-major: ``ry`` outer, ``rx``
inner, from ``(-1, -1)`` to ``(1, 1)`` for ``k = 3``.  Offset fields store
``(ox, oy)`` per tap in that same order, giving ``2k^2`` channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidAnchorError, ShapeError
from .geometry import OrientedBox

# anchors with a side below this many pixels are rejected by the sampler
MIN_ANCHOR_SIDE = 1e-3


@dataclass
class FeatureGrid:
    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"feature grid must be H x W x C, got shape {self.values.shape}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature grid contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class ConvKernel:
    """Weights laid out ``(out_channels, in_channels, k, k)``; ``[.., ky, kx]``."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        w = self.weights
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"kernel must be O x C x k x k, got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {w.shape[2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel contains non-finite weights")

    @property
    def k(self):
        return self.weights.shape[2]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]


@dataclass
class AnchorMap:
    """One oriented box per grid location, ``boxes`` shaped ``(H, W, 5)`` in image pixels."""

    boxes: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim != 3 or self.boxes.shape[2] != 5:
            raise ShapeError(f"anchor map must be H x W x 5, got {self.boxes.shape}")

    @property
    def shape(self):
        return self.boxes.shape[:2]

    def box(self, i: int, j: int) -> OrientedBox:
        return OrientedBox.from_array(self.boxes[i, j])

    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 5)


@dataclass
class OffsetField:
    values: np.ndarray
    k: int = field(default=3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 2 * self.k * self.k:
            raise ShapeError(
                f"offset field for k={self.k} must be H x W x {2 * self.k * self.k}, got {self.values.shape}"
            )

    @property
    def dim(self):
        return self.values.shape[2]


def taps(k: int = 3) -> list[tuple[int, int]]:
    """Kernel grid ``R`` as ``(rx, ry)`` pairs in row-major order."""
    r = k // 2
    return [(rx, ry) for ry in range(-r, r + 1) for rx in range(-r, r + 1)]


def identity_anchor_map(height: int, width: int, stride: int, k: int = 3) -> AnchorMap:
    """Anchors whose sampling grid is the regular convolution grid.

    Location ``(i, j)`` gets centre ``stride * (j, i)``, sides ``k * stride``
    and angle 0.
    """
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    boxes = np.stack(
        [jj * stride, ii * stride, np.full(ii.shape, k * stride), np.full(ii.shape, k * stride), np.zeros(ii.shape)],
        axis=-1,
    ).astype(np.float64)
    return AnchorMap(boxes, stride)


def _fetch(values, yi, xi):
    H, W, _ = values.shape
    valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
    v = values[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
    return np.where(valid[..., None], v, 0.0)


def _gather(values, xs, ys):
    """Bilinear samples at arrays of points; returns ``xs.shape + (C,)``."""
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = _fetch(values, y0, x0)
    v01 = _fetch(values, y0, x0 + 1)
    v10 = _fetch(values, y0 + 1, x0)
    v11 = _fetch(values, y0 + 1, x0 + 1)
    return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11


def bilinear_sample(fm: FeatureGrid, point) -> np.ndarray:
    x, y = float(point[0]), float(point[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite sample point {point!r}")
    return _gather(fm.values, np.array(x), np.array(y))


def bilinear_sample_grad(fm: FeatureGrid, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value and partial derivatives ``(v, dv/dx, dv/dy)`` at a point.

    The derivative is one-sided at integer coordinates (the interpolant has a
    kink there); it takes the cell to the lower-right.
    """
    x, y = float(point[0]), float(point[1])
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    xi, yi = np.array(x0), np.array(y0)
    v00 = _fetch(fm.values, yi, xi)
    v01 = _fetch(fm.values, yi, xi + 1)
    v10 = _fetch(fm.values, yi + 1, xi)
    v11 = _fetch(fm.values, yi + 1, xi + 1)
    value = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11
    ddx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    ddy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return value, ddx, ddy


def _accumulate(tap_samples, weights):
    """Sum ``W(r) . sample_r`` tap by tap, then input channel by channel.

    The fixed order keeps results bit-identical between the plain and the
    aligned convolution whenever the samples coincide.
    """
    O, C, k, _ = weights.shape
    r = k // 2
    out = None
    for (rx, ry), samples in tap_samples:
        wt = weights[:, :, ry + r, rx + r]
        if out is None:
            out = np.zeros(samples.shape[:2] + (O,))
        for c in range(C):
            out += samples[:, :, c, None] * wt[None, None, :, c]
    return out


def conv2d_ref(fm: FeatureGrid, kern: ConvKernel) -> FeatureGrid:
    """Same-size correlation ``Y(p) = sum_r W(r) X(p + r)`` with zero padding."""
    if fm.channels != kern.in_channels:
        raise ShapeError(f"grid has {fm.channels} channels, kernel expects {kern.in_channels}")
    k = kern.k
    r = k // 2
    H, W = fm.height, fm.width
    padded = np.pad(fm.values, ((r, r), (r, r), (0, 0)))

    def shifted():
        for rx, ry in taps(k):
            yield (rx, ry), padded[r + ry : r + ry + H, r + rx : r + rx + W]

    return FeatureGrid(_accumulate(shifted(), kern.weights), fm.stride)


def _check_anchor_sides(w, h):
    if np.any(~(np.asarray(w) >= MIN_ANCHOR_SIDE)) or np.any(~(np.asarray(h) >= MIN_ANCHOR_SIDE)):
        raise InvalidAnchorError(f"anchor sides must be at least {MIN_ANCHOR_SIDE} px")


def _locations(boxes, k, stride):
    """Sampling locations for an ``(..., 5)`` box array: ``(..., k*k, 2)``."""
    cx, cy, w, h, t = (boxes[..., i, None] for i in range(5))
    _check_anchor_sides(w, h)
    rr = np.array(taps(k), dtype=np.float64)
    a = w * rr[:, 0] / k
    b = h * rr[:, 1] / k
    c, s = np.cos(t), np.sin(t)
    # (a, b) . R^T(theta) = a (cos, -sin) + b (sin, cos)
    lx = (cx + a * c + b * s) / stride
    ly = (cy - a * s + b * c) / stride
    return np.stack([lx, ly], axis=-1)


def sampling_locations(anchor: OrientedBox, p, k: int = 3, stride: int = 1) -> np.ndarray:
    """Anchor-guided sampling points in feature-grid ``(x, y)`` coordinates.

    ``p`` is the output location ``(x, y)``; it does not enter the formula
    but is validated to be integral.  Returns ``(k*k, 2)`` in tap order.
    """
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    px, py = p
    if int(px) != px or int(py) != py:
        raise ValueError(f"grid location must be integral, got {p!r}")
    return _locations(anchor.as_array(), k, stride)


def offset_field(anchors: AnchorMap, k: int = 3, stride: int | None = None) -> OffsetField:
    """Displacements of the anchor-guided taps from the regular grid ``p + r``."""
    stride = anchors.stride if stride is None else stride
    H, W = anchors.shape
    loc = _locations(anchors.boxes, k, stride)
    rr = np.array(taps(k), dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    reg_x = jj[..., None] + rr[:, 0]
    reg_y = ii[..., None] + rr[:, 1]
    off = np.empty((H, W, k * k, 2))
    off[..., 0] = loc[..., 0] - reg_x
    off[..., 1] = loc[..., 1] - reg_y
    return OffsetField(off.reshape(H, W, 2 * k * k), k)


def align_conv(fm: FeatureGrid, kern: ConvKernel, offsets) -> FeatureGrid:
    """``Y(p) = sum_r W(r) X(p + r + o_r(p))`` with bilinear ``X``."""
    if fm.channels != kern.in_channels:
        raise ShapeError(f"grid has {fm.channels} channels, kernel expects {kern.in_channels}")
    off = offsets.values if isinstance(offsets, OffsetField) else np.asarray(offsets, dtype=np.float64)
    k = kern.k
    H, W = fm.height, fm.width
    if off.shape != (H, W, 2 * k * k):
        raise ShapeError(f"offset field must be {(H, W, 2 * k * k)}, got {off.shape}")
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")

    def sampled():
        for t, (rx, ry) in enumerate(taps(k)):
            xs = jj + rx + off[..., 2 * t]
            ys = ii + ry + off[..., 2 * t + 1]
            yield (rx, ry), _gather(fm.values, xs, ys)

    return FeatureGrid(_accumulate(sampled(), kern.weights), fm.stride)
