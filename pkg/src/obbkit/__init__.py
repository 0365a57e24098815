"""Oriented bounding-box detection toolkit: geometry, anchor-aligned feature
sampling, rotating filters, assignment, losses, NMS, tiling and evaluation."""

from .geometry import OrientedBox, Quad, canonicalize, quad_to_box, rotated_iou
from .postprocess import Detection, rotated_nms

__version__ = "0.1.0"

__all__ = ["Detection", "OrientedBox", "Quad", "canonicalize", "quad_to_box", "rotated_iou", "rotated_nms", "__version__"]
