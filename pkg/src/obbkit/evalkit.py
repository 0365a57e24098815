"""Detection evaluation: greedy matching, PR curves and VOC-style AP."""

from __future__ import annotations

import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import OrientedBox, axis_aligned_hull, rotated_iou
from .postprocess import rank_order

log = logging.getLogger(__name__)

METRICS = ("voc07", "voc12")
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GroundTruth:
    box: OrientedBox
    difficult: bool = False


@dataclass(frozen=True)
class ScoredBox:
    """One detection of a single class, tagged with its image."""

    image_id: str
    box: OrientedBox
    score: float


@dataclass
class PRCurve:
    """Ranked TP/FP flags with the cumulative precision/recall they imply.

    Detections matched to a difficult gt are dropped from the ranking.
    """

    tp: np.ndarray
    fp: np.ndarray
    n_gt: int
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def recall(self) -> np.ndarray:
        ctp = np.cumsum(self.tp)
        return ctp / self.n_gt if self.n_gt else np.zeros(len(ctp))

    @property
    def precision(self) -> np.ndarray:
        ctp = np.cumsum(self.tp)
        cfp = np.cumsum(self.fp)
        denom = ctp + cfp
        return np.divide(ctp, denom, out=np.zeros(len(denom)), where=denom > 0)


def hbb_iou(a: OrientedBox, b: OrientedBox) -> float:
    """IoU of the horizontal hulls of two boxes."""
    ax0, ay0, ax1, ay1 = axis_aligned_hull(a)
    bx0, by0, bx1, by1 = axis_aligned_hull(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _iou_fn(mode: str):
    if mode == "obb":
        return rotated_iou
    if mode == "hbb":
        return hbb_iou
    raise ValueError(f"unknown box mode {mode!r}")


def match_detections(
    dets: Sequence[ScoredBox],
    gts: Mapping[str, Sequence[GroundTruth]],
    iou_thr: float = 0.5,
    mode: str = "obb",
) -> PRCurve:
    """Greedy matching in descending score order (lower index first on ties).

    Each detection takes the highest-IoU unmatched non-difficult gt of its
    image with IoU >= ``iou_thr`` (TP); failing that, a detection overlapping
    a difficult gt at that level is ignored; anything else is a FP.
    """
    iou = _iou_fn(mode)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    n_gt = sum(1 for v in gts.values() for g in v if not g.difficult)
    tp, fp, scores = [], [], []
    for i in rank_order([d.score for d in dets]):
        d = dets[i]
        cand = gts.get(d.image_id, ())
        best, best_iou = -1, -1.0
        hits_difficult = False
        for j, g in enumerate(cand):
            v = iou(d.box, g.box)
            if v < iou_thr:
                continue
            if g.difficult:
                hits_difficult = True
            elif not used[d.image_id][j] and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[d.image_id][best] = True
            tp.append(1)
            fp.append(0)
        elif hits_difficult:
            continue
        else:
            tp.append(0)
            fp.append(1)
        scores.append(d.score)
    return PRCurve(np.array(tp, dtype=np.int64), np.array(fp, dtype=np.int64), n_gt, np.array(scores))


@dataclass(frozen=True)
class APResult:
    ap: float
    no_gt: bool = False


def average_precision(pr: PRCurve, metric: str = "voc12") -> APResult:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if pr.n_gt == 0:
        return APResult(0.0, no_gt=True)
    rec, prec = pr.recall, pr.precision
    if metric == "voc07":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = prec[rec >= t - 1e-12]
            total += above.max() if len(above) else 0.0
        return APResult(float(total / 11.0))
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return APResult(float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1])))


@dataclass
class EvalReport:
    """AP per ``(class, threshold)`` plus class-mean summaries."""

    metric: str
    thresholds: list[float]
    ap: dict[str, dict[float, float]]
    no_gt: list[str]
    mode: str = "obb"

    def map_at(self, thr: float) -> float:
        vals = [self.ap[c][thr] for c in self.ap if c not in self.no_gt]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def maps(self) -> dict[float, float]:
        return {t: self.map_at(t) for t in self.thresholds}

    @property
    def map_range(self) -> float:
        return float(np.mean(list(self.maps.values()))) if self.thresholds else 0.0

    @property
    def empty(self) -> bool:
        return len(self.no_gt) == len(self.ap)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        heads = [f"AP@{t:.2f}" for t in self.thresholds]
        buf.write("\t".join(["class", *heads, "note"]) + "\n")
        for cls in sorted(self.ap):
            row = [cls, *(f"{self.ap[cls][t]:.4f}" for t in self.thresholds)]
            row.append("no-gt" if cls in self.no_gt else "")
            buf.write("\t".join(row) + "\n")
        buf.write("\t".join(["mAP", *(f"{self.map_at(t):.4f}" for t in self.thresholds), ""]) + "\n")
        if len(self.thresholds) > 1:
            buf.write(f"mAP@range\t{self.map_range:.4f}\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mode": self.mode,
            "thresholds": self.thresholds,
            "per_class": {c: {f"{t:.2f}": self.ap[c][t] for t in self.thresholds} for c in sorted(self.ap)},
            "no_gt_classes": sorted(self.no_gt),
            "map": {f"{t:.2f}": v for t, v in self.maps.items()},
            "map_range": self.map_range,
            "empty": self.empty,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def map_eval(
    dets: Mapping[str, Sequence[ScoredBox]],
    gts: Mapping[str, Mapping[str, Sequence[GroundTruth]]],
    thresholds: Sequence[float] = (0.5,),
    metric: str = "voc12",
    mode: str = "obb",
    curves: dict | None = None,
    workers: int = 1,
) -> EvalReport:
    """Evaluate per class and threshold.

    ``dets`` maps class -> detections, ``gts`` maps class -> image id ->
    ground truth.  Classes with no non-difficult gt are reported but left out
    of the mean.  Pass a dict as ``curves`` to collect the PR curves.
    ``workers`` > 1 evaluates (class, threshold) pairs on a thread pool;
    results do not depend on it.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    classes = sorted(set(dets) | set(gts))
    jobs = [(cls, t) for cls in classes for t in thresholds]

    def run(job):
        cls, t = job
        pr = match_detections(dets.get(cls, ()), gts.get(cls, {}), t, mode)
        return pr, average_precision(pr, metric)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    ap: dict[str, dict[float, float]] = {cls: {} for cls in classes}
    no_gt = []
    for (cls, t), (pr, res) in zip(jobs, results):
        ap[cls][t] = res.ap
        if curves is not None:
            curves[(cls, t)] = pr
        if res.no_gt and cls not in no_gt:
            no_gt.append(cls)
    if no_gt:
        log.info("classes without ground truth left out of the mean: %s", ", ".join(no_gt))
    return EvalReport(metric, list(thresholds), ap, no_gt, mode)
