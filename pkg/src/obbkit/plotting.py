"""Report figures written straight to files (no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Polygon, Rectangle

from .evalkit import PRCurve
from .geometry import OrientedBox

RC = {"figsize": (6.0, 4.5), "dpi": 120}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, bbox_inches="tight")
    return path


def plot_pr_curves(curves: Mapping[str, PRCurve], path, title: str = "") -> Path:
    """Precision against recall, one line per label."""
    fig = Figure(figsize=RC["figsize"], dpi=RC["dpi"])
    ax = fig.add_subplot(111)
    for label, pr in sorted(curves.items()):
        if pr.n_gt == 0 or len(pr.tp) == 0:
            continue
        ax.step([0.0, *pr.recall], [1.0, *pr.precision], where="post", label=label, linewidth=1.2)
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title)
    if ax.lines:
        ax.legend(fontsize="small", loc="lower left", frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ap_bars(ap: Mapping[str, float], path, title: str = "") -> Path:
    fig = Figure(figsize=RC["figsize"], dpi=RC["dpi"])
    ax = fig.add_subplot(111)
    names = sorted(ap)
    ax.barh(range(len(names)), [ap[n] for n in names], color="#4c72b0")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize="small")
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("AP")
    if title:
        ax.set_title(title)
    ax.invert_yaxis()
    return _save(fig, path)


def plot_tile_plan(
    width: int,
    height: int,
    windows: Sequence[tuple[int, int, int, int]],
    path,
    boxes: Sequence[OrientedBox] = (),
) -> Path:
    """Image outline, tile windows and optional boxes, y axis pointing down."""
    fig = Figure(figsize=RC["figsize"], dpi=RC["dpi"])
    ax = fig.add_subplot(111)
    ax.add_patch(Rectangle((0, 0), width, height, fill=False, edgecolor="black", linewidth=1.5))
    for i, (x, y, w, h) in enumerate(windows):
        ax.add_patch(Rectangle((x, y), w, h, fill=False, edgecolor=f"C{i % 10}", linewidth=0.8, alpha=0.7))
    for b in boxes:
        ax.add_patch(Polygon(b.corners(), closed=True, fill=False, edgecolor="red", linewidth=0.6))
    ax.set_xlim(0, width)
    ax.set_ylim(height, 0)
    ax.set_aspect("equal")
    ax.set_title(f"{len(windows)} windows over {width}x{height}")
    return _save(fig, path)
