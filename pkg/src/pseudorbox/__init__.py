"""Rotated-box pseudo labels from point annotations.

Geometry primitives, a Voronoi-bounded watershed, prior-guided candidate-mask
selection, closed-form box losses, pyramid label assignment, and a batch
pipeline with a CLI (``pseudorbox``).
"""
from .geometry import (
    AnnotatedPoint,
    BinaryMask,
    DegenerateInputError,
    Gaussian2,
    LabelMap,
    Point2,
    RBox,
    gaussian_to_rbox,
    min_area_rect,
    min_enclosing_circle,
    rbox_iou,
    rbox_to_gaussian,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedPoint", "BinaryMask", "DegenerateInputError", "Gaussian2", "LabelMap", "Point2", "RBox",
    "gaussian_to_rbox", "min_area_rect", "min_enclosing_circle", "rbox_iou", "rbox_to_gaussian",
]
