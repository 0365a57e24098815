"""Command-line entry point: ``obbkit <command> [options]``.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.  The
``OBBKIT_THREADS`` environment variable sets the worker count used by
``merge`` and ``eval`` (default 1).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidBoxError, ParseError, ShapeError, TilingError, ZeroAreaError
from .evalkit import COCO_THRESHOLDS, GroundTruth, ScoredBox, map_eval
from .featops import AnchorMap, offset_field
from .geometry import OrientedBox
from .ioformats import (
    CATEGORIES,
    UNKNOWN,
    DetectionRecord,
    atomic_write_text,
    chip_filename,
    format_chip_detections,
    format_number,
    parse_chip_detections,
    read_anchor_file,
    read_detections,
    read_dota_annotation,
    write_detections,
    write_grid,
)
from .pipeline import DEFAULT_CHIP, DEFAULT_MERGE_NMS, DEFAULT_STRIDE, Jitter, TilePlan, merge_detections, plan_tiles, simulate_chip_detections
from .postprocess import Detection, rotated_nms

log = logging.getLogger("obbkit")

THREADS_ENV = "OBBKIT_THREADS"


class CommandError(Exception):
    """A failure the user can fix by changing inputs; reported without a traceback."""


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"{THREADS_ENV} must be at least 1, got {n}")
    return n


class ClassTable:
    """Category name <-> class id, known categories first, extras appended."""

    def __init__(self):
        self.names = list(CATEGORIES)

    def id(self, name: str) -> int:
        if name not in self.names:
            self.names.append(name)
        return self.names.index(name)

    def name(self, class_id: int) -> str:
        return self.names[class_id]


def _read_plan(path) -> TilePlan:
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"tile plan {path} not found")
    return TilePlan.from_text(path.read_text(encoding="utf-8"), source=path)


def _read_chip_file(path, table: ClassTable) -> list[Detection]:
    recs = parse_chip_detections(Path(path).read_text(encoding="utf-8"), source=path)
    return [Detection(box, table.id(cat), score) for cat, score, box in recs]


def cmd_tile(args) -> int:
    plan = plan_tiles(args.width, args.height, args.chip, args.stride)
    if args.out:
        atomic_write_text(args.out, plan.to_text())
    else:
        sys.stdout.write(plan.to_text())
    if args.plot:
        from .plotting import plot_tile_plan

        plot_tile_plan(plan.width, plan.height, plan.windows, Path(args.plot))
    print(f"{len(plan)} windows", file=sys.stderr if not args.out else sys.stdout)
    return 0


def _read_gt_dir(gt_dir) -> dict[str, dict[str, list[GroundTruth]]]:
    """class -> image id -> ground truth, from ``<image-id>.txt`` DOTA files."""
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise CommandError(f"ground-truth directory {gt_dir} not found")
    out: dict[str, dict[str, list[GroundTruth]]] = {}
    for p in sorted(gt_dir.glob("*.txt")):
        for r in read_dota_annotation(p):
            out.setdefault(r.category, {}).setdefault(p.stem, []).append(GroundTruth(r.box(), bool(r.difficult)))
    # every image appears under every class so unmatched detections count as FP
    images = sorted({p.stem for p in gt_dir.glob("*.txt")})
    for per_img in out.values():
        for img in images:
            per_img.setdefault(img, [])
    return out


def cmd_simulate(args) -> int:
    plan = _read_plan(args.plan)
    ann = read_dota_annotation(args.gt)
    table = ClassTable()
    gts = [(r.box(), table.id(r.category)) for r in ann]
    jitter = Jitter(args.jitter_center, args.jitter_side, args.jitter_angle)
    out_dir = Path(args.out)
    for i, win in enumerate(plan.windows):
        dets = simulate_chip_detections(gts, win, jitter, seed=(args.seed, i))
        atomic_write_text(out_dir / chip_filename(i), format_chip_detections((table.name(d.class_id), d.score, d.box) for d in dets))
    print(f"{len(plan)} chip files written to {out_dir}")
    return 0


def cmd_merge(args) -> int:
    plan = _read_plan(args.plan)
    chips = Path(args.chips)
    missing = [(i, w) for i, w in enumerate(plan.windows) if not (chips / chip_filename(i)).is_file()]
    if missing:
        listing = ", ".join(f"{chip_filename(i)} for window {w}" for i, w in missing)
        raise CommandError(f"missing chip detection files: {listing}")
    table = ClassTable()
    paths = [chips / chip_filename(i) for i in range(len(plan.windows))]
    with ThreadPoolExecutor(thread_count()) as pool:
        parsed = list(pool.map(lambda p: parse_chip_detections(p.read_text(encoding="utf-8"), source=p), paths))
    per_chip = [(w, [Detection(box, table.id(cat), s) for cat, s, box in recs]) for w, recs in zip(plan.windows, parsed)]
    merged = merge_detections(per_chip, args.nms)
    records = [DetectionRecord(args.image_id, table.name(d.class_id), d.box, d.score) for d in merged]
    write_detections(records, args.out)
    print(f"{sum(len(d) for _, d in per_chip)} chip detections merged into {len(merged)}")
    return 0


def cmd_eval(args) -> int:
    gts = _read_gt_dir(args.gt)
    det_dir = Path(args.dets)
    if not det_dir.is_dir():
        raise CommandError(f"detection directory {det_dir} not found")
    dets_raw = read_detections(det_dir)
    dets_raw.pop(UNKNOWN, None)
    det_classes = {c for c, v in dets_raw.items() if v}
    extra_dets = sorted(det_classes - set(gts))
    if extra_dets:
        log.warning("detections for classes without ground truth ignored: %s", ", ".join(extra_dets))
    missing = sorted(set(gts) - set(dets_raw))
    if missing:
        log.warning("no detection file for ground-truth classes: %s", ", ".join(missing))
    classes = sorted(set(gts))
    dets = {c: [ScoredBox(r.image_id, r.box, r.score) for r in dets_raw.get(c, [])] for c in classes}
    thresholds = list(COCO_THRESHOLDS) if args.range else [args.iou]
    curves: dict = {}
    report = map_eval(dets, {c: gts[c] for c in classes}, thresholds, args.metric, args.mode, curves, workers=thread_count())
    sys.stdout.write(report.to_tsv())
    if report.empty:
        print("# no ground truth: mAP reported as 0", file=sys.stderr)
    if args.json:
        atomic_write_text(args.json, report.to_json() + "\n")
    if args.plot:
        from .plotting import plot_ap_bars, plot_pr_curves

        plot_dir = Path(args.plot)
        t0 = thresholds[0]
        plot_pr_curves({c: curves[(c, t0)] for c in classes}, plot_dir / "pr_curves.png", f"IoU {t0:.2f}, {args.metric}")
        plot_ap_bars({c: report.ap[c][t0] for c in classes}, plot_dir / "ap_per_class.png", f"mAP {report.map_at(t0):.4f}")
    return 0


def cmd_nms(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise CommandError(f"detection file {path} not found")
    table = ClassTable()
    dets = _read_chip_file(path, table)
    kept = rotated_nms(dets, args.iou, per_class=not args.class_agnostic)
    text = format_chip_detections((table.name(d.class_id), d.score, d.box) for d in kept)
    if args.out:
        atomic_write_text(args.out, text)
        print(f"{len(dets)} detections, {len(kept)} kept")
    else:
        sys.stdout.write(text)
    return 0


def cmd_offsets(args) -> int:
    path = Path(args.anchors)
    if not path.is_file():
        raise CommandError(f"anchor file {path} not found")
    boxes, file_stride = read_anchor_file(path)
    stride = args.stride if args.stride is not None else file_stride
    field = offset_field(AnchorMap(boxes, stride), args.k, stride)
    H, W, D = field.values.shape
    if args.out:
        write_grid(args.out, field.values, stride)
    if args.dump or not args.out:
        lines = [f"# {H} {W} {D}"]
        for i in range(H):
            for j in range(W):
                lines.append(" ".join([str(i), str(j), *(format_number(v) for v in field.values[i, j])]))
        sys.stdout.write("\n".join(lines) + "\n")
    return 0


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="obbkit", description="Oriented-box detection toolkit.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tile", help="plan overlapping windows over a large image", formatter_class=fmt)
    t.add_argument("--width", type=int, required=True, help="image width in pixels")
    t.add_argument("--height", type=int, required=True, help="image height in pixels")
    t.add_argument("--chip", type=int, default=DEFAULT_CHIP, help="window size in pixels")
    t.add_argument("--stride", type=int, default=DEFAULT_STRIDE, help="step between window origins")
    t.add_argument("--out", help="plan file to write (stdout if omitted)")
    t.add_argument("--plot", help="also render the plan to this image file")
    t.set_defaults(func=cmd_tile)

    s = sub.add_parser("simulate", help="write synthetic per-window detections from an annotation file", formatter_class=fmt)
    s.add_argument("--gt", required=True, help="DOTA annotation file of the whole image")
    s.add_argument("--plan", required=True, help="tile plan file")
    s.add_argument("--out", required=True, help="directory for chip_NNNN.txt files")
    s.add_argument("--jitter-center", type=_non_negative, default=0.0, help="max centre noise in pixels")
    s.add_argument("--jitter-side", type=_non_negative, default=0.0, help="max relative side noise")
    s.add_argument("--jitter-angle", type=_non_negative, default=0.0, help="max angle noise in radians")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("merge", help="map chip detections to the image and suppress duplicates", formatter_class=fmt)
    m.add_argument("--plan", required=True, help="tile plan file")
    m.add_argument("--chips", required=True, help="directory holding chip_NNNN.txt files")
    m.add_argument("--nms", type=_unit_interval, default=DEFAULT_MERGE_NMS, help="IoU threshold for merge NMS")
    m.add_argument("--out", required=True, help="directory for per-class detection files")
    m.add_argument("--image-id", default="image", help="image id written to the detection files")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="per-class AP and mAP of detections against annotations", formatter_class=fmt)
    e.add_argument("--dets", required=True, help="directory of Task1_<class>.txt files")
    e.add_argument("--gt", required=True, help="directory of <image-id>.txt DOTA annotations")
    e.add_argument("--iou", type=_unit_interval, default=0.5, help="IoU threshold")
    e.add_argument("--metric", choices=("voc07", "voc12"), default="voc12", help="AP definition")
    e.add_argument("--range", action="store_true", help="evaluate IoU 0.50:0.05:0.95 instead of --iou")
    e.add_argument("--mode", choices=("obb", "hbb"), default="obb", help="oriented or horizontal-hull IoU")
    e.add_argument("--json", help="also write the report as JSON to this file")
    e.add_argument("--plot", help="directory for PR-curve and per-class AP figures")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("nms", help="rotated NMS over a detection file", formatter_class=fmt)
    n.add_argument("--in", dest="input", required=True, help="file of 'category score x1 y1 ... x4 y4' lines")
    n.add_argument("--iou", type=_unit_interval, default=0.5, help="IoU threshold")
    n.add_argument("--class-agnostic", action="store_true", help="suppress across classes")
    n.add_argument("--out", help="output file (stdout if omitted)")
    n.set_defaults(func=cmd_nms)

    o = sub.add_parser("offsets", help="anchor-guided sampling offsets for an anchor map", formatter_class=fmt)
    o.add_argument("--anchors", required=True, help="anchor map (text or grid container)")
    o.add_argument("--k", type=int, default=3, help="kernel size")
    o.add_argument("--stride", type=int, default=None, help="feature stride; the anchor file value when omitted")
    o.add_argument("--dump", action="store_true", help="print offsets as text even when --out is given")
    o.add_argument("--out", help="write the offset field as a grid container")
    o.set_defaults(func=cmd_offsets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except TilingError as exc:
        parser.error(str(exc))
    except (CommandError, ParseError, ShapeError, InvalidBoxError, ZeroAreaError, OSError) as exc:
        print(f"obbkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
