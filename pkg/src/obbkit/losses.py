"""Reference evaluation of the two-stage detection objective.

Both stages (the anchor refinement stage and the final detection stage)
contribute focal classification over non-ignored anchors plus smooth-L1
regression over positives, each normalised by its positive count.  The
second stage is weighted by ``lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import IGNORE, Assignment
from .boxcodec import BoxDelta, encode_array

PROB_EPS = 1e-12
DEFAULT_BETA = 1.0 / 9.0


def focal_loss(p: float, is_positive: bool, alpha: float | None = 0.25, gamma: float = 2.0) -> float:
    """Sigmoid focal loss for one probability.

    ``alpha=None`` drops the class-balance weight; with ``gamma=0`` that is
    plain binary cross-entropy.
    """
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    pt = p if is_positive else 1.0 - p
    if alpha is None:
        at = 1.0
    else:
        at = alpha if is_positive else 1.0 - alpha
    return -at * (1.0 - pt) ** gamma * math.log(pt)


def focal_loss_array(p: np.ndarray, target: np.ndarray, alpha: float | None = 0.25, gamma: float = 2.0) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=bool)
    pt = np.where(target, p, 1.0 - p)
    at = 1.0 if alpha is None else np.where(target, alpha, 1.0 - alpha)
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def smooth_l1_array(pred: np.ndarray, target: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    if beta <= 0:
        return d
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1(pred: BoxDelta, target: BoxDelta, beta: float = DEFAULT_BETA) -> float:
    return float(np.sum(smooth_l1_array(pred.as_array(), target.as_array(), beta)))


@dataclass
class StageOutput:
    """Predictions and targets of one stage over ``n`` anchors.

    ``cls_prob`` is ``(n, K)`` sigmoid probabilities, ``deltas`` and
    ``targets`` are ``(n, 5)``; ``gt_classes`` maps gt index to class id.
    """

    cls_prob: np.ndarray
    deltas: np.ndarray
    assignment: Assignment
    gt_classes: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.cls_prob = np.asarray(self.cls_prob, dtype=np.float64)
        if self.cls_prob.ndim != 2 or len(self.cls_prob) != len(self.assignment.labels):
            raise ValueError(
                f"class scores must be (n, K) for {len(self.assignment.labels)} anchors, got {self.cls_prob.shape}"
            )
        self.deltas = np.asarray(self.deltas, dtype=np.float64).reshape(-1, 5)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 5)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64)
        n = len(self.assignment.labels)
        if len(self.deltas) != n or len(self.targets) != n:
            raise ValueError(
                f"{n} assigned anchors but {len(self.deltas)} deltas and {len(self.targets)} targets"
            )


def regression_targets(anchors: np.ndarray, gts: np.ndarray, assignment: Assignment) -> np.ndarray:
    """Encoded targets for positive anchors (zeros elsewhere)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 5)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    out = np.zeros_like(anchors)
    pos = assignment.positive
    if pos.any():
        out[pos] = encode_array(gts[assignment.labels[pos]], anchors[pos])
    return out


@dataclass
class LossBreakdown:
    fam_cls: float
    fam_reg: float
    odm_cls: float
    odm_reg: float
    total: float
    n_fam_pos: int
    n_odm_pos: int
    fam_norm: int
    odm_norm: int
    lam: float = 1.0
    empty: bool = False


def stage_terms(stage: StageOutput, alpha=0.25, gamma=2.0, beta=DEFAULT_BETA) -> tuple[float, float, int]:
    """Summed classification and regression terms plus the positive count."""
    labels = stage.assignment.labels
    n, K = stage.cls_prob.shape
    keep = labels != IGNORE
    pos = labels >= 0
    onehot = np.zeros((n, K), dtype=bool)
    if pos.any():
        onehot[np.flatnonzero(pos), stage.gt_classes[labels[pos]]] = True
    cls = focal_loss_array(stage.cls_prob[keep], onehot[keep], alpha, gamma)
    reg = smooth_l1_array(stage.deltas[pos], stage.targets[pos], beta)
    # numpy sums pairwise, which keeps the reduction order fixed
    return float(np.sum(cls)), float(np.sum(reg)), int(pos.sum())


def multitask_loss(
    fam: StageOutput,
    odm: StageOutput,
    lam: float = 1.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
    beta: float = DEFAULT_BETA,
) -> LossBreakdown:
    if len(fam.assignment.labels) == 0 and len(odm.assignment.labels) == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 1, 1, lam, empty=True)
    fc, fr, nf = stage_terms(fam, alpha, gamma, beta)
    oc, orr, no = stage_terms(odm, alpha, gamma, beta)
    norm_f, norm_o = max(nf, 1), max(no, 1)
    total = (fc + fr) / norm_f + lam * (oc + orr) / norm_o
    return LossBreakdown(fc, fr, oc, orr, total, nf, no, norm_f, norm_o, lam)
