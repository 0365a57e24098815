"""Readers and writers for annotation, detection and grid files.

Formats
-------
DOTA annotation
    Optional ``imagesource:`` / ``gsd:`` header lines, then one object per
    line: ``x1 y1 x2 y2 x3 y3 x4 y4 category difficult``.
Per-class detection files
    ``Task1_<category>.txt`` holding ``image-id score x1 y1 ... x4 y4`` with
    4-decimal scores and 2-decimal coordinates.
Chip detection files
    ``chip_0000.txt`` (one per tile window, in plan order) holding
    ``category score x1 y1 ... x4 y4`` in chip-local pixels.
Grid container
    Little-endian: magic ``b"OBBG"``, uint32 version, uint32 H, W, C, stride,
    then ``H*W*C`` float64 values in row-major ``(H, W, C)`` order.  Used for
    feature grids, offset fields (C = 2k^2) and anchor maps (C = 5).
"""

from __future__ import annotations

import math
import os
import re
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ShapeError, ZeroAreaError
from .geometry import OrientedBox, Quad, box_to_quad, canonicalize, quad_to_box

CATEGORIES = (
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
)
ABBREVIATIONS = dict(
    zip(
        ("pl", "bd", "br", "gtf", "sv", "lv", "sh", "tc", "bc", "st", "sbf", "ra", "ha", "sp", "hc"),
        CATEGORIES,
    )
)
UNKNOWN = "unknown"
HEADER_PREFIXES = ("imagesource:", "gsd:")

GRID_MAGIC = b"OBBG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIIII")


class FormatWarning(UserWarning):
    """A record was accepted with a default or routed to a fallback bucket."""


def canonical_category(name: str) -> str:
    """Lowercase name; known abbreviations expand to the full category."""
    key = name.strip().lower()
    return ABBREVIATIONS.get(key, key)


def category_id(name: str) -> int | None:
    try:
        return CATEGORIES.index(canonical_category(name))
    except ValueError:
        return None


def format_number(v: float) -> str:
    """Shortest text that parses back to the same float."""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _parse_float(tok: str, line: int, column: int, source) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", line, column, source) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", line, column, source)
    return v


@dataclass(frozen=True)
class AnnotationRecord:
    quad: Quad
    category: str
    difficult: int = 0

    def __post_init__(self):
        if not self.category:
            raise ValueError("category must be non-empty")
        if self.difficult not in (0, 1):
            raise ValueError(f"difficult must be 0 or 1, got {self.difficult}")
        object.__setattr__(self, "category", canonical_category(self.category))

    def box(self) -> OrientedBox:
        return quad_to_box(self.quad)


def parse_dota_annotation(text: str, source=None) -> list[AnnotationRecord]:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.lower().startswith(HEADER_PREFIXES):
            continue
        toks = line.split()
        if len(toks) < 9:
            raise ParseError(f"expected 8 coordinates, a category and a difficult flag, got {len(toks)} fields", lineno, len(toks) + 1, source)
        if len(toks) > 10:
            raise ParseError(f"unexpected extra field {toks[10]!r}", lineno, 11, source)
        coords = [_parse_float(t, lineno, i + 1, source) for i, t in enumerate(toks[:8])]
        category = toks[8]
        try:
            float(category)
        except ValueError:
            pass
        else:
            raise ParseError(f"category expected, got number {category!r}", lineno, 9, source)
        if len(toks) == 9:
            warnings.warn(f"{source or '<text>'} line {lineno}: missing difficult flag, using 0", FormatWarning, stacklevel=2)
            difficult = 0
        elif toks[9] in ("0", "1"):
            difficult = int(toks[9])
        else:
            raise ParseError(f"difficult flag must be 0 or 1, got {toks[9]!r}", lineno, 10, source)
        records.append(AnnotationRecord(Quad.from_flat(coords), category, difficult))
    return records


def read_dota_annotation(path) -> list[AnnotationRecord]:
    path = Path(path)
    return parse_dota_annotation(path.read_text(encoding="utf-8"), source=path)


def format_dota_annotation(records: Iterable[AnnotationRecord], header: Mapping[str, str] | None = None) -> str:
    lines = [f"{k}:{v}" for k, v in (header or {}).items()]
    for r in records:
        coords = " ".join(format_number(c) for c in r.quad.flat())
        lines.append(f"{coords} {r.category} {r.difficult}")
    return "\n".join(lines) + ("\n" if lines else "")


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class DetectionRecord:
    """A detection tied to an image and a category name."""

    image_id: str
    category: str
    box: OrientedBox
    score: float


def _quad_text(box: OrientedBox) -> str:
    return " ".join(f"{c:.2f}" for c in box_to_quad(box).flat())


def rect_from_rounded_quad(q: Quad) -> OrientedBox:
    """Box from a quad known to be a rectangle up to rounding.

    Opposite edges are averaged, which keeps the corner error at the rounding
    level; the min-area rectangle would follow one rounded edge and amplify it.
    """
    p = np.array(q.points)
    a = 0.5 * ((p[1] - p[0]) + (p[2] - p[3]))
    b = 0.5 * ((p[2] - p[1]) + (p[3] - p[0]))
    w, h = float(np.hypot(*a)), float(np.hypot(*b))
    if w <= 0 or h <= 0:
        raise ZeroAreaError("quad collapses to a segment")
    cx, cy = p.mean(axis=0)
    return canonicalize(OrientedBox(float(cx), float(cy), w, h, math.atan2(-a[1], a[0])))


def _parse_scored_quad(toks, lineno, source, first_col):
    score = _parse_float(toks[0], lineno, first_col, source)
    coords = [_parse_float(t, lineno, first_col + 1 + i, source) for i, t in enumerate(toks[1:9])]
    try:
        box = rect_from_rounded_quad(Quad.from_flat(coords))
    except (ZeroAreaError, ValueError) as exc:
        raise ParseError(f"degenerate quad: {exc}", lineno, first_col + 1, source) from None
    return score, box


def detection_filename(category: str) -> str:
    return f"Task1_{category}.txt"


def write_detections(records: Iterable[DetectionRecord], out_dir, categories: Sequence[str] = CATEGORIES) -> list[Path]:
    """One file per category (all of ``categories`` are created, even empty)."""
    out_dir = Path(out_dir)
    by_cat: dict[str, list[str]] = {c: [] for c in categories}
    for r in records:
        if any(ch.isspace() for ch in r.image_id) or not r.image_id:
            raise ValueError(f"image id {r.image_id!r} must be non-empty without whitespace")
        by_cat.setdefault(canonical_category(r.category), []).append(f"{r.image_id} {r.score:.4f} {_quad_text(r.box)}")
    paths = []
    for cat in sorted(by_cat):
        p = out_dir / detection_filename(cat)
        lines = by_cat[cat]
        atomic_write_text(p, "\n".join(lines) + ("\n" if lines else ""))
        paths.append(p)
    return paths


_TASK1 = re.compile(r"^Task1_(.+)\.txt$")


def read_detections(in_dir) -> dict[str, list[DetectionRecord]]:
    """Read every ``Task1_*.txt`` file; unknown categories land under ``"unknown"``."""
    out: dict[str, list[DetectionRecord]] = {}
    for p in sorted(Path(in_dir).iterdir()):
        m = _TASK1.match(p.name)
        if not m:
            continue
        cat = canonical_category(m.group(1))
        if cat not in CATEGORIES:
            warnings.warn(f"{p.name}: unknown category {m.group(1)!r}, collected as {UNKNOWN!r}", FormatWarning, stacklevel=2)
        bucket = out.setdefault(cat if cat in CATEGORIES else UNKNOWN, [])
        for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            toks = raw.split()
            if not toks:
                continue
            if len(toks) != 10:
                raise ParseError(f"expected image id, score and 8 coordinates, got {len(toks)} fields", lineno, None, p)
            score, box = _parse_scored_quad(toks[1:], lineno, p, 2)
            bucket.append(DetectionRecord(toks[0], cat, box, score))
    return out


def chip_filename(index: int) -> str:
    return f"chip_{index:04d}.txt"


def format_chip_detections(records: Iterable[tuple[str, float, OrientedBox]]) -> str:
    lines = [f"{canonical_category(c)} {s:.4f} {_quad_text(b)}" for c, s, b in records]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_chip_detections(text: str, source=None) -> list[tuple[str, float, OrientedBox]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks or toks[0].startswith("#"):
            continue
        if len(toks) != 10:
            raise ParseError(f"expected category, score and 8 coordinates, got {len(toks)} fields", lineno, None, source)
        score, box = _parse_scored_quad(toks[1:], lineno, source, 2)
        out.append((canonical_category(toks[0]), score, box))
    return out


def grid_to_bytes(values: np.ndarray, stride: int = 1) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError(f"grid container holds H x W x C arrays, got {values.shape}")
    H, W, C = values.shape
    head = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, H, W, C, int(stride))
    return head + values.astype("<f8").tobytes(order="C")


def grid_from_bytes(data: bytes, source=None) -> tuple[np.ndarray, int]:
    if len(data) < _GRID_HEADER.size:
        raise ParseError("file too short for a grid header", source=source)
    magic, version, H, W, C, stride = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise ParseError(f"bad magic {magic!r}", source=source)
    if version != GRID_VERSION:
        raise ParseError(f"unsupported grid version {version}", source=source)
    n = H * W * C
    body = data[_GRID_HEADER.size :]
    if len(body) != 8 * n:
        raise ParseError(f"expected {8 * n} payload bytes for {H}x{W}x{C}, got {len(body)}", source=source)
    return np.frombuffer(body, dtype="<f8").reshape(H, W, C).astype(np.float64), stride


def write_grid(path, values: np.ndarray, stride: int = 1) -> None:
    atomic_write_bytes(path, grid_to_bytes(values, stride))


def read_grid(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    return grid_from_bytes(path.read_bytes(), source=path)


def parse_anchor_text(text: str, source=None) -> tuple[np.ndarray, int]:
    """Anchor map text: header ``H W stride`` then ``H*W`` lines ``cx cy w h theta`` row-major."""
    rows = []
    header = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks or toks[0].startswith("#"):
            continue
        if header is None:
            if len(toks) != 3:
                raise ParseError("header must be 'H W stride'", lineno, None, source)
            try:
                header = tuple(int(t) for t in toks)
            except ValueError:
                raise ParseError("header values must be integers", lineno, None, source) from None
            if min(header) < 1:
                raise ParseError("header values must be positive", lineno, None, source)
            continue
        if len(toks) != 5:
            raise ParseError(f"expected 5 box fields, got {len(toks)}", lineno, len(toks) + 1, source)
        rows.append([_parse_float(t, lineno, i + 1, source) for i, t in enumerate(toks)])
    if header is None:
        raise ParseError("missing 'H W stride' header", source=source)
    H, W, stride = header
    if len(rows) != H * W:
        raise ParseError(f"header promises {H * W} anchors, found {len(rows)}", source=source)
    return np.array(rows, dtype=np.float64).reshape(H, W, 5), stride


def format_anchor_text(boxes: np.ndarray, stride: int) -> str:
    boxes = np.asarray(boxes, dtype=np.float64)
    H, W, _ = boxes.shape
    lines = [f"{H} {W} {stride}"]
    lines += [" ".join(format_number(v) for v in row) for row in boxes.reshape(-1, 5)]
    return "\n".join(lines) + "\n"


def read_anchor_file(path) -> tuple[np.ndarray, int]:
    """Anchors from either the grid container (C = 5) or the text format."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == GRID_MAGIC:
        boxes, stride = grid_from_bytes(data, source=path)
        if boxes.shape[2] != 5:
            raise ParseError(f"anchor grid needs 5 channels, got {boxes.shape[2]}", source=path)
        return boxes, stride
    return parse_anchor_text(data.decode("utf-8"), source=path)
