"""Active rotating filters and orientation pooling.

A rotating filter has weights ``(out, in, N, 3, 3)``: ``N`` orientation
channels of 3x3 taps.  Rotating it by ``i * 2pi / N`` clockwise shifts the
eight border taps by ``i * 8 / N`` ring positions and rolls the orientation
channels by ``i``.  Oriented grids group channels as ``c * N + n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .featops import ConvKernel, FeatureGrid, conv2d_ref

SUPPORTED_ORIENTATIONS = (1, 2, 4, 8)

# border of a 3x3 kernel, clockwise from the top-left, as (row, col)
RING = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))
_RING_ROWS = np.array([r for r, _ in RING])
_RING_COLS = np.array([c for _, c in RING])


@dataclass
class RotatingFilter:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        w = self.weights
        if w.ndim != 5 or w.shape[3:] != (3, 3):
            raise ShapeError(f"rotating filter must be out x in x N x 3 x 3, got {w.shape}")
        if w.shape[2] not in SUPPORTED_ORIENTATIONS:
            raise ShapeError(f"N must be one of {SUPPORTED_ORIENTATIONS}, got {w.shape[2]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("rotating filter contains non-finite weights")

    @property
    def n_orientations(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class OrientedFeatureGrid(FeatureGrid):
    n_orientations: int = 8

    def __post_init__(self):
        super().__post_init__()
        if self.n_orientations < 1 or self.channels % self.n_orientations:
            raise ShapeError(f"{self.channels} channels do not split into {self.n_orientations} orientations")

    @property
    def base_channels(self) -> int:
        return self.channels // self.n_orientations


def rotate_filter(f: RotatingFilter, i: int) -> RotatingFilter:
    N = f.n_orientations
    if not 0 <= i < N:
        raise IndexError(f"rotation index {i} outside [0, {N})")
    if i == 0:
        return RotatingFilter(f.weights.copy())
    shift = i * (8 // N)
    w = np.roll(f.weights, i, axis=2)
    out = w.copy()
    dst = (np.arange(8) + shift) % 8
    out[..., _RING_ROWS[dst], _RING_COLS[dst]] = w[..., _RING_ROWS, _RING_COLS]
    return RotatingFilter(out)


def arf_conv(x: OrientedFeatureGrid, f: RotatingFilter) -> OrientedFeatureGrid:
    """Convolve with every rotated copy of the filter.

    Output orientation ``i`` sums, over input orientations ``n``, the
    correlation of ``X^(n)`` with orientation channel ``n`` of the filter
    rotated by ``i``.
    """
    N = f.n_orientations
    if x.n_orientations != N:
        raise ShapeError(f"grid has {x.n_orientations} orientations, filter has {N}")
    if x.base_channels != f.in_channels:
        raise ShapeError(f"grid has {x.base_channels} base channels, filter expects {f.in_channels}")
    H, W = x.height, x.width
    O = f.out_channels
    out = np.empty((H, W, O, N))
    for i in range(N):
        wi = rotate_filter(f, i).weights.reshape(O, f.in_channels * N, 3, 3)
        out[..., i] = conv2d_ref(x, ConvKernel(wi)).values
    return OrientedFeatureGrid(out.reshape(H, W, O * N), x.stride, N)


def orientation_pool(x: OrientedFeatureGrid) -> FeatureGrid:
    """Max over all ``N`` orientation channels of each base channel."""
    N = x.n_orientations
    H, W = x.height, x.width
    return FeatureGrid(x.values.reshape(H, W, x.base_channels, N).max(axis=-1), x.stride)
