"""Sparse/dense routing and prior-guided selection among candidate masks.

A candidate is scored by five shape/appearance metrics, always in this
order: center alignment, color consistency, rectangularity, circularity,
aspect-ratio reliability.  The per-class weights decide how much each one
counts (and may be negative to punish a feature).

Shape metrics treat each set pixel as a unit square, so the bounding
rectangle and circle are fitted to pixel-square corners; this makes a
filled a x b rectangle score exactly 1 for rectangularity.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .geometry import (
    BinaryMask,
    DegenerateInputError,
    Point2,
    RBox,
    clip_convex,
    is_degenerate,
    min_area_rect,
    min_enclosing_circle,
    polygon_area,
    row_extreme_centers,
)

log = logging.getLogger(__name__)

METRIC_NAMES = ("center_alignment", "color_consistency", "rectangularity", "circularity", "aspect_ratio")


class Branch(str, enum.Enum):
    CANDIDATE_MASK = "candidate_mask"
    WATERSHED = "watershed"


@dataclass(frozen=True)
class RoutingDecision:
    branch: Branch


def route_image(instance_count: int, n_thr: int) -> RoutingDecision:
    """Sparse images (``instance_count <= n_thr``) go to candidate-mask selection."""
    if instance_count < 0 or n_thr < 0:
        raise ValueError("instance_count and n_thr must be non-negative")
    return RoutingDecision(Branch.CANDIDATE_MASK if instance_count <= n_thr else Branch.WATERSHED)


@dataclass(frozen=True)
class MetricParams:
    sigma_c_factor: float = 0.05
    lambda_color: float = 30.0
    k_ar: float = 1.0

    def __post_init__(self):
        if not (self.sigma_c_factor > 0 and self.lambda_color > 0 and self.k_ar > 0):
            raise ValueError("metric parameters must be positive")


@dataclass(frozen=True)
class ClassPrior:
    class_id: int = 0
    weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    ar_range: tuple[float, float] = (1.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != 5:
            raise ValueError("ClassPrior needs exactly five weights")
        lo, hi = self.ar_range
        if not 1 <= lo <= hi:
            raise ValueError(f"ar_range must satisfy 1 <= r_min <= r_max, got {self.ar_range}")


@dataclass(frozen=True, eq=False)
class MaskCandidate:
    mask: BinaryMask
    instance_index: int = 0
    source_tag: str = ""

    def __post_init__(self):
        if not self.mask.bits.any():
            raise DegenerateInputError("candidate mask is empty")


# --------------------------------------------------------------------------
# shape helpers


def mask_rect(mask: BinaryMask) -> RBox:
    """Min-area rectangle around the mask's pixel squares."""
    return min_area_rect(mask.outline_corners())


def _degenerate(mask: BinaryMask) -> bool:
    return is_degenerate(row_extreme_centers(mask.bits))


def _image_polygon(width: int, height: int) -> np.ndarray:
    return np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=float)


def clipped_rect_area(box: RBox, width: int, height: int) -> float:
    return polygon_area(clip_convex(box.corners(), _image_polygon(width, height)))


def clipped_circle_area(center: Point2, radius: float, width: int, height: int) -> float:
    """Area of the disk intersected with ``[0, width] x [0, height]``."""
    cx, cy = center
    if cx - radius >= 0 and cx + radius <= width and cy - radius >= 0 and cy + radius <= height:
        return math.pi * radius * radius
    x0, x1 = max(0.0, cx - radius), min(float(width), cx + radius)
    if x1 <= x0:
        return 0.0

    def chord(x):
        s = math.sqrt(max(0.0, radius * radius - (x - cx) ** 2))
        return max(0.0, min(float(height), cy + s) - max(0.0, cy - s))

    brk = []
    for y in (0.0, float(height)):
        dy = y - cy
        if abs(dy) < radius:
            s = math.sqrt(radius * radius - dy * dy)
            brk += [cx - s, cx + s]
    brk = [b for b in brk if x0 < b < x1]
    val, _ = integrate.quad(chord, x0, x1, points=brk or None, limit=200, epsabs=1e-10, epsrel=1e-12)
    return val


# --------------------------------------------------------------------------
# metrics


def score_center_alignment(mask: BinaryMask, prompt: Point2, image_diag: float, p: MetricParams) -> float:
    """Gaussian of the prompt-to-rectangle-center distance; 0 if the prompt is outside."""
    box = mask_rect(mask)
    if not box.contains(np.array([prompt[0], prompt[1]]), strict=False):
        return 0.0
    sigma_c = p.sigma_c_factor * image_diag
    d2 = (prompt[0] - box.cx) ** 2 + (prompt[1] - box.cy) ** 2
    return math.exp(-d2 / (2 * sigma_c ** 2))


def weighted_channel_std(image: np.ndarray, mask: BinaryMask, prompt: Point2, sigma_c: float) -> float:
    """Mean over channels of the prompt-weighted standard deviation inside the mask."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[:2] != mask.bits.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.bits.shape} differ in size")
    rows, cols = np.nonzero(mask.bits)
    d2 = (cols + 0.5 - prompt[0]) ** 2 + (rows + 0.5 - prompt[1]) ** 2
    w = np.exp(-d2 / (2 * sigma_c ** 2))
    total = w.sum()
    if total <= 0:
        # prompt far from every pixel: all weights underflow, fall back to uniform
        w = np.ones_like(w)
        total = w.sum()
    w = w / total
    vals = img[rows, cols, :]
    mean = w @ vals
    var = w @ (vals - mean) ** 2
    return float(np.sqrt(np.maximum(var, 0.0)).mean())


def score_color_consistency(image: np.ndarray, mask: BinaryMask, prompt: Point2, p: MetricParams) -> float:
    """``exp(-std / lambda)`` for the prompt-weighted color spread within the mask.

    ``image`` is a ``(H, W)`` or ``(H, W, C)`` array in 8-bit value units.
    """
    h, w = mask.bits.shape
    sigma_c = p.sigma_c_factor * math.hypot(w, h)
    return math.exp(-weighted_channel_std(image, mask, prompt, sigma_c) / p.lambda_color)


def score_rectangularity(mask: BinaryMask) -> float:
    if _degenerate(mask):
        log.debug("degenerate mask: rectangularity set to 1")
        return 1.0
    area = float(mask.bits.sum())
    rect = clipped_rect_area(mask_rect(mask), mask.width, mask.height)
    return min(1.0, area / rect) if rect > 0 else 1.0


def score_circularity(mask: BinaryMask) -> float:
    if _degenerate(mask):
        log.debug("degenerate mask: circularity set to 1")
        return 1.0
    area = float(mask.bits.sum())
    center, radius = min_enclosing_circle(mask.outline_corners())
    circ = clipped_circle_area(center, radius, mask.width, mask.height)
    return min(1.0, area / circ) if circ > 0 else 1.0


def aspect_ratio_score(ar: float, ar_range: tuple[float, float], k: float) -> float:
    r_min, r_max = ar_range
    if ar < r_min:
        dev = r_min / ar - 1
    elif ar > r_max:
        dev = ar / r_max - 1
    else:
        return 1.0
    return math.exp(-k * dev)


def score_aspect_ratio(mask: BinaryMask, prior: ClassPrior, p: MetricParams) -> float:
    box = mask_rect(mask)
    if min(box.w, box.h) <= 0:
        return 0.0
    return aspect_ratio_score(max(box.w, box.h) / min(box.w, box.h), prior.ar_range, p.k_ar)


def metric_vector(mask: BinaryMask, prompt: Point2, image: np.ndarray, prior: ClassPrior, p: MetricParams) -> np.ndarray:
    h, w = mask.bits.shape
    return np.array([
        score_center_alignment(mask, prompt, math.hypot(w, h), p),
        score_color_consistency(image, mask, prompt, p),
        score_rectangularity(mask),
        score_circularity(mask),
        score_aspect_ratio(mask, prior, p),
    ])


@dataclass(frozen=True, eq=False)
class MaskChoice:
    best: MaskCandidate
    score: float
    index: int
    metrics: np.ndarray = field(repr=False)
    all_scores: tuple = ()


def select_best_mask(candidates: Sequence[MaskCandidate], prompt: Point2, image: np.ndarray,
                     prior: ClassPrior, p: MetricParams) -> MaskChoice:
    """Pick the candidate with the highest prior-weighted metric sum.

    Ties go to the lowest candidate index.
    """
    if not candidates:
        raise DegenerateInputError("select_best_mask needs at least one candidate")
    weights = np.asarray(prior.weights)
    metrics = [metric_vector(c.mask, prompt, image, prior, p) for c in candidates]
    scores = [float(weights @ m) for m in metrics]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return MaskChoice(candidates[best], scores[best], best, metrics[best], tuple(scores))
