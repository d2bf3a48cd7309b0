"""Progressive label assignment over a feature pyramid.

Early epochs take pseudo boxes from the Voronoi watershed; from the switch
epoch on, each ground-truth point takes the highest-scoring prediction among
the anchors nearest to it on every level.  Either way the boxes feed the
same anchor-free assignment rule (see :func:`standard_label_assign`).
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import AnnotatedPoint, Point2, RBox
from .watershed import (
    GrayImage,
    WatershedConfig,
    basins_to_pseudo_rboxes,
    class_specific_watershed,
    voronoi_watershed,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FpnLevel:
    index: int
    stride: int
    regress_range: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.regress_range
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if not lo < hi:
            raise ValueError(f"regress_range must satisfy lo < hi, got {self.regress_range}")

    def grid_shape(self, image_w: int, image_h: int) -> tuple[int, int]:
        return math.ceil(image_h / self.stride), math.ceil(image_w / self.stride)

    def admits(self, extent: float) -> bool:
        lo, hi = self.regress_range
        return lo < extent <= hi


DEFAULT_LEVELS = (
    FpnLevel(0, 4, (0.0, 32.0)),
    FpnLevel(1, 8, (32.0, 64.0)),
    FpnLevel(2, 16, (64.0, 128.0)),
    FpnLevel(3, 32, (128.0, 256.0)),
    FpnLevel(4, 64, (256.0, math.inf)),
)


def check_levels(levels: Sequence[FpnLevel]) -> None:
    """Levels must have increasing strides and ranges tiling (0, inf)."""
    if not levels:
        raise ValueError("at least one pyramid level is required")
    if levels[0].regress_range[0] != 0 or levels[-1].regress_range[1] != math.inf:
        raise ValueError("regress ranges must start at 0 and end at inf")
    for a, b in zip(levels, levels[1:]):
        if b.stride <= a.stride:
            raise ValueError("levels must be ordered by increasing stride")
        if a.regress_range[1] != b.regress_range[0]:
            raise ValueError(f"gap or overlap between levels {a.index} and {b.index}")


def anchor_points(level: FpnLevel, image_w: int, image_h: int) -> np.ndarray:
    """Anchor centers as a ``(rows, cols, 2)`` array of ``(x, y)``."""
    rows, cols = level.grid_shape(image_w, image_h)
    s = level.stride
    xs = np.arange(cols) * s + s / 2
    ys = np.arange(rows) * s + s / 2
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class LevelPredictions:
    """Per-anchor predictions of one level.

    ``boxes`` is ``(rows, cols, 5)`` holding ``(cx, cy, w, h, theta)``;
    ``scores`` is ``(rows, cols)``.
    """

    level_index: int
    boxes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "boxes", np.asarray(self.boxes, dtype=float))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        if self.boxes.shape[:2] != self.scores.shape or self.boxes.shape[2:] != (5,):
            raise ValueError(f"boxes {self.boxes.shape} and scores {self.scores.shape} disagree")

    def box_at(self, i: int, j: int) -> RBox:
        return RBox(*self.boxes[i, j])


class PhaseSource(str, enum.Enum):
    WATERSHED = "watershed"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class PseudoLabel:
    box: RBox
    gt_index: int
    source: PhaseSource
    score: float | None = None
    level_index: int | None = None


@dataclass(frozen=True, eq=False)
class Assignment:
    """Per-level ``(rows, cols)`` int grids: -1 negative, k >= 0 positive for gt k."""

    grids: list
    positives_per_gt: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Assignment) or len(self.grids) != len(other.grids):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.grids, other.grids))

    def to_bytes(self) -> bytes:
        return b"".join(g.astype("<i4").tobytes() for g in self.grids)


class Candidate(NamedTuple):
    box: RBox
    score: float
    clamped: bool


def nearest_cell(g: Point2, level: FpnLevel, image_w: int, image_h: int) -> tuple[int, int, bool]:
    """Lattice cell whose anchor is nearest ``g``; half-stride ties go to the lower index."""
    rows, cols = level.grid_shape(image_w, image_h)
    s = level.stride
    outside = not (0 <= g[0] <= image_w and 0 <= g[1] <= image_h)
    j = math.ceil(g[0] / s) - 1
    i = math.ceil(g[1] / s) - 1
    return min(max(i, 0), rows - 1), min(max(j, 0), cols - 1), outside


def nearest_anchor_candidate(g: Point2, preds: LevelPredictions, level: FpnLevel,
                             image_w: int, image_h: int) -> Candidate:
    i, j, outside = nearest_cell(g, level, image_w, image_h)
    if outside:
        log.warning("gt point %s lies outside the %dx%d image; clamped", tuple(g), image_w, image_h)
    if preds.scores.size == 0:
        raise ValueError("empty prediction grid")
    return Candidate(preds.box_at(i, j), float(preds.scores[i, j]), outside)


def dynamic_pseudo_labels(gts: Sequence[Point2], all_levels: Sequence[LevelPredictions],
                          levels: Sequence[FpnLevel], image_w: int, image_h: int) -> list[PseudoLabel]:
    """Highest-scoring nearest-anchor prediction across levels, per gt point."""
    if not levels:
        raise ValueError("at least one level is required")
    by_index = {p.level_index: p for p in all_levels}
    out = []
    for k, g in enumerate(gts):
        best: Candidate | None = None
        best_level = None
        for lvl in levels:
            cand = nearest_anchor_candidate(g, by_index[lvl.index], lvl, image_w, image_h)
            if best is None or cand.score > best.score:
                best, best_level = cand, lvl.index
        out.append(PseudoLabel(best.box, k, PhaseSource.DYNAMIC, best.score, best_level))
    return out


def standard_label_assign(pls: Sequence[PseudoLabel], levels: Sequence[FpnLevel], image_w: int, image_h: int,
                          center_radius: float | None = None) -> Assignment:
    """Anchor-free assignment on pseudo boxes.

    An anchor on level L is positive for gt k when it lies strictly inside
    box k and ``max(w, h) / 2`` falls in L's regress range; overlapping
    matches go to the smallest-area box (then the lowest gt index).  With
    ``center_radius`` set, anchors must also lie within
    ``center_radius * stride`` of the box center.
    """
    grids = []
    counts = [0] * len(pls)
    order = sorted(range(len(pls)), key=lambda k: (pls[k].box.area, k))
    for lvl in levels:
        anchors = anchor_points(lvl, image_w, image_h)
        grid = np.full(anchors.shape[:2], -1, dtype=np.int32)
        # fill largest first so smaller boxes overwrite
        for k in reversed(order):
            box = pls[k].box
            if not lvl.admits(max(box.w, box.h) / 2):
                continue
            inside = box.contains(anchors, strict=True)
            if center_radius is not None:
                d = np.hypot(anchors[..., 0] - box.cx, anchors[..., 1] - box.cy)
                inside &= d <= center_radius * lvl.stride
            grid[inside] = k
        for k in range(len(pls)):
            counts[k] += int((grid == k).sum())
        grids.append(grid)
    starved = [k for k, c in enumerate(counts) if c == 0]
    if starved:
        log.debug("gts without positive anchors: %s", starved)
    return Assignment(grids, counts)


def watershed_pseudo_labels(image: GrayImage, gts: Sequence[AnnotatedPoint], cfg: WatershedConfig,
                            class_specific: bool = False) -> list[PseudoLabel]:
    if class_specific:
        basins = class_specific_watershed(image, gts, cfg)
    else:
        basins = voronoi_watershed(image, gts, cfg)
    boxes = basins_to_pseudo_rboxes(basins)
    return [PseudoLabel(b, k, PhaseSource.WATERSHED) for k, b in enumerate(boxes)]


class PlaResult(NamedTuple):
    assignment: Assignment
    pseudo_labels: list


def pla(epoch: int, switch_epoch: int, image: GrayImage, gts: Sequence[AnnotatedPoint],
        preds: Sequence[LevelPredictions] | None, cfg: WatershedConfig, levels: Sequence[FpnLevel],
        *, class_specific: bool = False, static_boxes: Sequence[RBox] | None = None,
        center_radius: float | None = None) -> PlaResult:
    """One assignment step.

    ``epoch < switch_epoch`` uses watershed boxes (``static_boxes`` may
    supply them precomputed); otherwise predictions are required.
    """
    if epoch < switch_epoch:
        if static_boxes is not None:
            if len(static_boxes) != len(gts):
                raise ValueError("static_boxes must hold one box per gt")
            pls = [PseudoLabel(b, k, PhaseSource.WATERSHED) for k, b in enumerate(static_boxes)]
        elif gts:
            pls = watershed_pseudo_labels(image, gts, cfg, class_specific)
        else:
            pls = []
    else:
        if preds is None:
            raise ValueError(f"epoch {epoch} >= switch epoch {switch_epoch}: predictions are required")
        pls = dynamic_pseudo_labels([g.point for g in gts], preds, levels, image.width, image.height)
    return PlaResult(standard_label_assign(pls, levels, image.width, image.height, center_radius), pls)
