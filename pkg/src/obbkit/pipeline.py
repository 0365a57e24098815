"""Large-image handling and the detection-head composition.

Tiling splits an image into overlapping fixed-size windows, per-window
detections are shifted back to image coordinates and merged with rotated NMS.
A seeded synthetic detector stands in for a trained network so the whole
path can be checked end to end.  :func:`head_forward` wires the feature
operators together with random weights to check shapes and composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxcodec import decode_array
from .errors import ParseError, ShapeError, TilingError
from .featops import AnchorMap, ConvKernel, FeatureGrid, OffsetField, align_conv, conv2d_ref, offset_field
from .geometry import OrientedBox, canonicalize
from .orientation import SUPPORTED_ORIENTATIONS, OrientedFeatureGrid, RotatingFilter, arf_conv, orientation_pool
from .postprocess import Detection, rotated_nms, select_topk

DEFAULT_CHIP = 1024
DEFAULT_STRIDE = 824
DEFAULT_MERGE_NMS = 0.1

Window = tuple[int, int, int, int]


def axis_origins(dim: int, chip: int, stride: int) -> list[int]:
    """Window origins along one axis; the last one is clamped to the border."""
    last = max(dim - chip, 0)
    origins = []
    o = 0
    while True:
        origins.append(min(o, last))
        if o + chip >= dim:
            break
        o += stride
    return sorted(set(origins))


@dataclass
class TilePlan:
    width: int
    height: int
    chip: int
    stride: int
    windows: list[Window]

    def __len__(self):
        return len(self.windows)

    def covers(self) -> bool:
        """Interval check that every pixel lies in some window.

        Windows form a grid, so coverage reduces to each axis: consecutive
        origins must not leave a gap and the extremes must reach both borders.
        """
        for dim, idx in ((self.width, 0), (self.height, 1)):
            spans = sorted({(w[idx], w[idx] + w[idx + 2]) for w in self.windows})
            reach = 0
            for lo, hi in spans:
                if lo > reach:
                    return False
                reach = max(reach, hi)
            if reach < dim:
                return False
        return True

    def to_text(self) -> str:
        lines = [f"# image {self.width} {self.height} chip {self.chip} stride {self.stride}"]
        lines += [f"{x} {y} {w} {h}" for x, y, w, h in self.windows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source=None) -> "TilePlan":
        meta = None
        windows = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            toks = raw.split()
            if not toks:
                continue
            if toks[0] == "#":
                if len(toks) == 8 and toks[1] == "image":
                    meta = (int(toks[2]), int(toks[3]), int(toks[5]), int(toks[7]))
                continue
            if len(toks) != 4:
                raise ParseError(f"window line needs 'x0 y0 w h', got {len(toks)} fields", lineno, None, source)
            try:
                win = tuple(int(t) for t in toks)
            except ValueError:
                raise ParseError("window fields must be integers", lineno, None, source) from None
            if win[2] < 1 or win[3] < 1 or win[0] < 0 or win[1] < 0:
                raise ParseError(f"invalid window {win}", lineno, None, source)
            windows.append(win)
        if meta is None:
            W = max((x + w for x, _, w, _ in windows), default=0)
            H = max((y + h for _, y, _, h in windows), default=0)
            chip = max((max(w, h) for _, _, w, h in windows), default=0)
            meta = (W, H, chip, chip)
        return cls(meta[0], meta[1], meta[2], meta[3], windows)


def plan_tiles(width: int, height: int, chip: int = DEFAULT_CHIP, stride: int = DEFAULT_STRIDE) -> TilePlan:
    if width < 1 or height < 1:
        raise TilingError(f"image size must be positive, got {width}x{height}")
    if chip < 1:
        raise TilingError(f"chip size must be positive, got {chip}")
    if not 1 <= stride <= chip:
        raise TilingError(f"stride must lie in [1, chip={chip}], got {stride}")
    xs = axis_origins(width, chip, stride)
    ys = axis_origins(height, chip, stride)
    ww, hh = min(chip, width), min(chip, height)
    return TilePlan(width, height, chip, stride, [(x, y, ww, hh) for y in ys for x in xs])


def chip_to_global(det: Detection, window: Window) -> Detection:
    x0, y0 = window[0], window[1]
    return det.with_box(det.box.translated(x0, y0))


def global_to_chip(det: Detection, window: Window) -> Detection:
    x0, y0 = window[0], window[1]
    return det.with_box(det.box.translated(-x0, -y0))


def canonical_order(dets: Sequence[Detection]) -> list[Detection]:
    """Sort key independent of which chip reported what first."""
    return sorted(dets, key=lambda d: (-d.score, d.class_id, *d.box.as_tuple()))


def merge_detections(per_chip: Sequence[tuple[Window, Sequence[Detection]]], nms_thr: float = DEFAULT_MERGE_NMS) -> list[Detection]:
    """Map chip-local detections to the image and suppress duplicates per class."""
    everything = [chip_to_global(d, win) for win, dets in per_chip for d in dets]
    return rotated_nms(canonical_order(everything), nms_thr, per_class=True)


@dataclass(frozen=True)
class Jitter:
    """Bounds of the uniform noise applied by the synthetic detector.

    ``center`` in pixels, ``side`` as a relative scale, ``angle`` in radians.
    """

    center: float = 0.0
    side: float = 0.0
    angle: float = 0.0

    def __post_init__(self):
        if min(self.center, self.side, self.angle) < 0:
            raise ValueError("jitter bounds must be non-negative")
        if self.side >= 1:
            raise ValueError("relative side jitter must stay below 1")


def center_in_window(box: OrientedBox, window: Window) -> bool:
    x0, y0, w, h = window
    return x0 <= box.cx < x0 + w and y0 <= box.cy < y0 + h


def simulate_chip_detections(
    gts: Sequence[tuple[OrientedBox, int]],
    window: Window,
    jitter: Jitter = Jitter(),
    seed: int | Sequence[int] = 0,
) -> list[Detection]:
    """Detections a perfect-but-noisy detector would report inside one window.

    Objects whose centre falls in the window are kept, perturbed and shifted
    to window-local coordinates.  The score drops linearly from 1 with the
    mean normalised perturbation.  Noise is drawn for every object, visible
    or not, so one seed yields the same draw regardless of the window.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(len(gts), 5))
    enabled = np.array([jitter.center, jitter.center, jitter.side, jitter.side, jitter.angle]) > 0
    out = []
    for (box, cls), noise in zip(gts, u):
        if not center_in_window(box, window):
            continue
        noise = np.where(enabled, noise, 0.0)
        moved = OrientedBox(
            box.cx + jitter.center * noise[0],
            box.cy + jitter.center * noise[1],
            box.w * (1.0 + jitter.side * noise[2]),
            box.h * (1.0 + jitter.side * noise[3]),
            box.theta + jitter.angle * noise[4],
        )
        score = 1.0 - 0.5 * float(np.mean(np.abs(noise)))
        out.append(Detection(canonicalize(moved.translated(-window[0], -window[1])), cls, score))
    return out


def detect_tiled(
    gts: Sequence[tuple[OrientedBox, int]],
    plan: TilePlan,
    jitter: Jitter = Jitter(),
    seed: int = 0,
    nms_thr: float = DEFAULT_MERGE_NMS,
) -> tuple[list[Detection], list[tuple[Window, list[Detection]]]]:
    """Simulate every window (independent seeds) and merge; returns merged and per-chip output."""
    per_chip = [
        (win, simulate_chip_detections(gts, win, jitter, seed=(seed, i)))
        for i, win in enumerate(plan.windows)
    ]
    return merge_detections(per_chip, nms_thr), per_chip


def detect_whole_image(
    gts: Sequence[tuple[OrientedBox, int]],
    width: int,
    height: int,
    jitter: Jitter = Jitter(),
    seed: int = 0,
    nms_thr: float = DEFAULT_MERGE_NMS,
) -> list[Detection]:
    """Single window spanning the image."""
    win = (0, 0, width, height)
    return merge_detections([(win, simulate_chip_detections(gts, win, jitter, seed))], nms_thr)


@dataclass(frozen=True)
class HeadConfig:
    channels: int = 256
    fam_depth: int = 2
    odm_depth: int = 2
    n_orientations: int = 8
    num_classes: int = 15
    k: int = 3

    def __post_init__(self):
        if self.fam_depth < 1 or self.odm_depth < 1:
            raise ValueError("conv depths must be at least 1")
        if self.n_orientations not in SUPPORTED_ORIENTATIONS:
            raise ValueError(f"orientations must be one of {SUPPORTED_ORIENTATIONS}")
        if self.channels % self.n_orientations:
            raise ValueError(f"{self.channels} channels do not split into {self.n_orientations} orientations")
        if self.k % 2 == 0 or self.k < 1:
            raise ValueError("kernel size must be odd and positive")

    @property
    def base_channels(self) -> int:
        return self.channels // self.n_orientations


@dataclass
class HeadWeights:
    config: HeadConfig
    fam_cls_convs: list[ConvKernel]
    fam_reg_convs: list[ConvKernel]
    fam_cls: ConvKernel
    fam_reg: ConvKernel
    align: ConvKernel
    arf: RotatingFilter
    odm_cls_convs: list[ConvKernel]
    odm_reg_convs: list[ConvKernel]
    odm_cls: ConvKernel
    odm_reg: ConvKernel
    cls_bias: float = -math.log((1 - 0.01) / 0.01)


def init_head_weights(config: HeadConfig = HeadConfig(), seed: int = 0, reg_scale: float = 1e-3) -> HeadWeights:
    """Seeded Gaussian weights; regression outputs start near zero."""
    rng = np.random.default_rng(seed)
    C, B, K, k = config.channels, config.base_channels, config.num_classes, config.k

    def conv(o, c, scale=None):
        std = math.sqrt(2.0 / (c * k * k)) if scale is None else scale
        return ConvKernel(rng.normal(0.0, std, size=(o, c, k, k)))

    return HeadWeights(
        config,
        [conv(C, C) for _ in range(config.fam_depth)],
        [conv(C, C) for _ in range(config.fam_depth)],
        conv(K, C, 0.01),
        conv(5, C, reg_scale),
        conv(C, C),
        RotatingFilter(rng.normal(0.0, math.sqrt(2.0 / (C * 9)), size=(B, B, config.n_orientations, 3, 3))),
        [conv(B, B) for _ in range(config.odm_depth)],
        [conv(C, C) for _ in range(config.odm_depth)],
        conv(K, B, 0.01),
        conv(5, C, reg_scale),
    )


def _relu_stack(x: FeatureGrid, convs: Sequence[ConvKernel]) -> FeatureGrid:
    for kern in convs:
        x = FeatureGrid(np.maximum(conv2d_ref(x, kern).values, 0.0), x.stride)
    return x


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class LevelOutput:
    """Everything one pyramid level produces, kept for inspection."""

    refined: AnchorMap
    fam_deltas: np.ndarray
    fam_scores: np.ndarray
    offsets: OffsetField
    aligned: FeatureGrid
    oriented: OrientedFeatureGrid
    pooled: FeatureGrid
    odm_deltas: np.ndarray
    odm_scores: np.ndarray
    boxes: np.ndarray
    clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def candidates(self, stage: str = "odm") -> list[Detection]:
        """One detection per location: best class and its probability."""
        if stage == "odm":
            boxes, scores = self.boxes, self.odm_scores
        elif stage == "fam":
            boxes, scores = self.refined.boxes, self.fam_scores
        else:
            raise ValueError(f"stage must be 'odm' or 'fam', got {stage!r}")
        flat_s = scores.reshape(-1, scores.shape[-1])
        flat_b = boxes.reshape(-1, 5)
        best = np.argmax(flat_s, axis=1)
        return [
            Detection(OrientedBox.from_array(b), int(c), float(s[c]))
            for b, c, s in zip(flat_b, best, flat_s)
        ]


def head_level(x: FeatureGrid, weights: HeadWeights, anchors: AnchorMap) -> LevelOutput:
    cfg = weights.config
    if x.channels != cfg.channels:
        raise ShapeError(f"head expects {cfg.channels} channels, grid has {x.channels}")
    if anchors.shape != (x.height, x.width):
        raise ShapeError(f"anchor map {anchors.shape} does not match grid {(x.height, x.width)}")
    if anchors.stride != x.stride:
        raise ShapeError(f"anchor stride {anchors.stride} differs from grid stride {x.stride}")

    # anchor refinement: horizontal anchors -> rotated anchors
    fam_deltas = conv2d_ref(_relu_stack(x, weights.fam_reg_convs), weights.fam_reg).values
    fam_scores = _sigmoid(conv2d_ref(_relu_stack(x, weights.fam_cls_convs), weights.fam_cls).values + weights.cls_bias)
    refined_boxes, clamped_f = decode_array(fam_deltas, anchors.boxes)
    refined = AnchorMap(refined_boxes, anchors.stride)

    # features sampled along the refined anchors
    offsets = offset_field(refined, cfg.k, anchors.stride)
    aligned = FeatureGrid(np.maximum(align_conv(x, weights.align, offsets).values, 0.0), x.stride)

    # orientation-sensitive features feed regression, pooled ones feed classification
    oriented = arf_conv(OrientedFeatureGrid(aligned.values, x.stride, cfg.n_orientations), weights.arf)
    pooled = orientation_pool(oriented)
    odm_scores = _sigmoid(conv2d_ref(_relu_stack(pooled, weights.odm_cls_convs), weights.odm_cls).values + weights.cls_bias)
    odm_deltas = conv2d_ref(_relu_stack(oriented, weights.odm_reg_convs), weights.odm_reg).values
    boxes, clamped_o = decode_array(odm_deltas, refined_boxes)
    return LevelOutput(
        refined, fam_deltas, fam_scores, offsets, aligned, oriented, pooled, odm_deltas, odm_scores, boxes, clamped_f | clamped_o
    )


def head_forward(features: Sequence[FeatureGrid], weights: HeadWeights, anchors: Sequence[AnchorMap]) -> list[LevelOutput]:
    if len(features) != len(anchors):
        raise ShapeError(f"{len(features)} feature levels but {len(anchors)} anchor maps")
    return [head_level(x, weights, a) for x, a in zip(features, anchors)]


def infer(
    features: Sequence[FeatureGrid],
    weights: HeadWeights,
    anchors: Sequence[AnchorMap],
    stage: str = "odm",
    top_k: int = 2000,
    score_thr: float | None = None,
    nms_thr: float = 0.5,
) -> list[Detection]:
    """Head forward, top-k per image, then per-class rotated NMS.

    Refinement-stage output keeps low-confidence boxes (``score_thr`` 0) by
    default; final-stage output uses 0.05.
    """
    if score_thr is None:
        score_thr = 0.0 if stage == "fam" else 0.05
    cands = [d for lvl in head_forward(features, weights, anchors) for d in lvl.candidates(stage)]
    return rotated_nms(select_topk(cands, top_k, score_thr), nms_thr)
