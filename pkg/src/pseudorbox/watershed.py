"""Static pseudo labels from annotation points.

Pipeline: Voronoi partition of the points, marker construction (one small
foreground disk per point, background on cell boundaries and where a fixed
Gaussian around the point falls below a threshold), marker-controlled
flooding of the smoothed gradient magnitude, and one min-area rectangle per
basin.  The class-specific variant runs the whole chain once per class.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    AnnotatedPoint,
    DegenerateInputError,
    LabelMap,
    Point2,
    RBox,
    is_degenerate,
    min_area_rect,
    pixel_centers,
    row_extreme_centers,
)

log = logging.getLogger(__name__)

REFERENCE_DIAG = 1024 * math.sqrt(2)
BACKGROUND = -1
FG_DISK_RADIUS = 1.0


class MarkerCollisionError(ValueError):
    """Two annotation points are too close for their foreground disks to stay disjoint."""


@dataclass(frozen=True)
class GrayImage:
    """Luminance image, ``pixels`` is ``(height, width)`` with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=float))
        if self.pixels.ndim != 2:
            raise ValueError("GrayImage expects a 2-D array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "GrayImage":
        """Convert an 8-bit (or [0, 1]) color or gray array to luminance."""
        arr = np.asarray(rgb, dtype=float)
        if arr.max(initial=0) > 1.0:
            arr = arr / 255.0
        if arr.ndim == 3:
            if arr.shape[2] == 1:
                arr = arr[..., 0]
            else:
                arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
        return cls(arr)


@dataclass(frozen=True)
class MarkerMap:
    """``markers``: 0 unlabeled, -1 background, ``k >= 1`` foreground for instance k."""

    markers: np.ndarray
    num_instances: int

    @property
    def width(self) -> int:
        return self.markers.shape[1]

    @property
    def height(self) -> int:
        return self.markers.shape[0]


@dataclass(frozen=True)
class WatershedConfig:
    sigma_fg: float = 16.0
    tau_bg: float = 0.01
    gradient_smoothing: float = 1.5

    def __post_init__(self):
        if not self.sigma_fg > 0:
            raise ValueError("sigma_fg must be positive")
        if not 0 < self.tau_bg < 1:
            raise ValueError("tau_bg must lie in (0, 1)")
        if self.gradient_smoothing < 0:
            raise ValueError("gradient_smoothing must be non-negative")

    def scaled_to(self, width: int, height: int) -> "WatershedConfig":
        """Rescale the pixel-valued scales from a 1024x1024 reference to this image."""
        f = math.hypot(width, height) / REFERENCE_DIAG
        return replace(self, sigma_fg=self.sigma_fg * f, gradient_smoothing=self.gradient_smoothing * f)

    @property
    def background_radius(self) -> float:
        """Distance beyond which the Gaussian drops under ``tau_bg``."""
        return self.sigma_fg * math.sqrt(2 * math.log(1 / self.tau_bg))


def _coords(points) -> np.ndarray:
    out = []
    for p in points:
        if isinstance(p, AnnotatedPoint):
            p = p.point
        out.append((float(p[0]), float(p[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def _pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    return np.meshgrid(xs, ys)


def voronoi_partition(points: Sequence[Point2], width: int, height: int) -> LabelMap:
    """Label each pixel with its strictly nearest point (1-based); ties get 0."""
    pts = _coords(points)
    if len(pts) == 0:
        raise DegenerateInputError("voronoi_partition needs at least one point")
    gx, gy = _pixel_grid(width, height)
    best = np.full((height, width), np.inf)
    second = np.full((height, width), np.inf)
    label = np.zeros((height, width), dtype=np.int32)
    for k, (px, py) in enumerate(pts, start=1):
        d = (gx - px) ** 2 + (gy - py) ** 2
        closer = d < best
        second = np.where(closer, best, np.minimum(second, d))
        label = np.where(closer, k, label)
        best = np.where(closer, d, best)
    label[second == best] = 0
    return LabelMap(label, num_instances=len(pts))


def cell_boundaries(voronoi: LabelMap) -> np.ndarray:
    """Ridge pixels: tie pixels plus any pixel 4-adjacent to a different cell."""
    lab = voronoi.labels
    ridge = lab == 0
    diff_h = lab[:, 1:] != lab[:, :-1]
    diff_v = lab[1:, :] != lab[:-1, :]
    ridge[:, 1:] |= diff_h
    ridge[:, :-1] |= diff_h
    ridge[1:, :] |= diff_v
    ridge[:-1, :] |= diff_v
    return ridge


def foreground_disk(point, voronoi: LabelMap, k: int) -> np.ndarray:
    """Pixels whose center lies within 1 px of the point, restricted to cell k or ties."""
    px, py = point
    h, w = voronoi.height, voronoi.width
    mask = np.zeros((h, w), dtype=bool)
    c0, r0 = int(math.floor(px)), int(math.floor(py))
    for r in range(r0 - 2, r0 + 3):
        for c in range(c0 - 2, c0 + 3):
            if 0 <= r < h and 0 <= c < w:
                if math.hypot(c + 0.5 - px, r + 0.5 - py) <= FG_DISK_RADIUS:
                    mask[r, c] = voronoi.labels[r, c] in (0, k)
    # the pixel holding the point is always a marker
    mask[min(max(r0, 0), h - 1), min(max(c0, 0), w - 1)] = True
    return mask


def build_markers(points: Sequence[AnnotatedPoint], voronoi: LabelMap, cfg: WatershedConfig) -> MarkerMap:
    pts = _coords(points)
    if len(pts) != voronoi.num_instances:
        raise ValueError("voronoi was not built from these points")
    if len(pts) > 1:
        d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
        np.fill_diagonal(d, np.inf)
        i, j = np.unravel_index(int(np.argmin(d)), d.shape)
        if d[i, j] < 2 * FG_DISK_RADIUS:
            raise MarkerCollisionError(
                f"points {i} and {j} are {d[i, j]:.3f} px apart; foreground disks would collide")

    lab = voronoi.labels
    gx, gy = _pixel_grid(voronoi.width, voronoi.height)
    owner = np.clip(lab - 1, 0, None)
    dist2 = (gx - pts[owner, 0]) ** 2 + (gy - pts[owner, 1]) ** 2
    prob = np.exp(-dist2 / (2 * cfg.sigma_fg ** 2))
    markers = np.zeros(lab.shape, dtype=np.int32)
    markers[(prob < cfg.tau_bg) | cell_boundaries(voronoi)] = BACKGROUND
    for k, p in enumerate(pts, start=1):
        markers[foreground_disk(p, voronoi, k)] = k
    return MarkerMap(markers, num_instances=len(pts))


def gradient_magnitude(image: GrayImage, smoothing: float) -> np.ndarray:
    img = image.pixels
    if smoothing > 0:
        img = ndimage.gaussian_filter(img, smoothing, mode="nearest")
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def flood(surface: np.ndarray, markers: np.ndarray) -> np.ndarray:
    """Meyer flooding from marker pixels over ``surface`` (4-connectivity).

    Queue key is ``(surface value, rank, insertion order)`` where rank is 0
    for foreground floods and 1 for background, so on exactly flat plateaus
    foreground marker basins grow first.  Every pixel ends up labeled.
    """
    h, w = surface.shape
    out = markers.astype(np.int32).ravel().copy()
    surf = surface.ravel().tolist()
    heap: list = []
    seq = 0
    labels = out.tolist()

    def neighbors(i):
        r, c = divmod(i, w)
        if c > 0:
            yield i - 1
        if c < w - 1:
            yield i + 1
        if r > 0:
            yield i - w
        if r < h - 1:
            yield i + w

    for i in np.flatnonzero(out):
        i = int(i)
        lab = labels[i]
        rank = 1 if lab == BACKGROUND else 0
        for j in neighbors(i):
            if labels[j] == 0:
                heap.append((surf[j], rank, seq, j, lab))
                seq += 1
    heapq.heapify(heap)
    while heap:
        _, rank, _, i, lab = heapq.heappop(heap)
        if labels[i] != 0:
            continue
        labels[i] = lab
        for j in neighbors(i):
            if labels[j] == 0:
                heapq.heappush(heap, (surf[j], rank, seq, j, lab))
                seq += 1
    return np.array(labels, dtype=np.int32).reshape(h, w)


def watershed(image: GrayImage, markers: MarkerMap, cfg: WatershedConfig) -> LabelMap:
    m = markers.markers
    if m.shape != image.pixels.shape:
        raise ValueError(f"marker map {m.shape} does not match image {image.pixels.shape}")
    if not (m > 0).any():
        raise DegenerateInputError("watershed needs at least one foreground marker")
    surface = gradient_magnitude(image, cfg.gradient_smoothing)
    labels = flood(surface, m)
    labels[labels == BACKGROUND] = 0
    return LabelMap(labels, num_instances=markers.num_instances)


def voronoi_watershed(image: GrayImage, points: Sequence[AnnotatedPoint], cfg: WatershedConfig) -> LabelMap:
    """Plain (class-agnostic) Voronoi + markers + watershed chain."""
    vor = voronoi_partition([p.point for p in points], image.width, image.height)
    return watershed(image, build_markers(points, vor, cfg), cfg)


@dataclass(frozen=True, eq=False)
class InstanceBasins:
    """Instance -> pixel-set mapping; basins of different classes may overlap.

    ``masks[k]`` is the ``(height, width)`` basin of instance ``k`` (0-based).
    """

    masks: list

    @property
    def num_instances(self) -> int:
        return len(self.masks)

    @classmethod
    def from_label_map(cls, lm: LabelMap) -> "InstanceBasins":
        return cls([lm.labels == k for k in range(1, lm.num_instances + 1)])

    def to_label_map(self) -> LabelMap:
        """Flatten to a label map; where basins overlap the smaller basin wins."""
        if not self.masks:
            raise ValueError("no instances")
        h, w = self.masks[0].shape
        labels = np.zeros((h, w), dtype=np.int32)
        order = sorted(range(len(self.masks)), key=lambda k: -int(self.masks[k].sum()))
        for k in order:
            labels[self.masks[k]] = k + 1
        return LabelMap(labels, num_instances=len(self.masks))


def class_specific_watershed(image: GrayImage, points: Sequence[AnnotatedPoint], cfg: WatershedConfig) -> InstanceBasins:
    if not points:
        raise DegenerateInputError("class_specific_watershed needs at least one point")
    masks: list = [None] * len(points)
    for cls in sorted({p.class_id for p in points}):
        idx = [i for i, p in enumerate(points) if p.class_id == cls]
        basins = voronoi_watershed(image, [points[i] for i in idx], cfg)
        for local, i in enumerate(idx, start=1):
            masks[i] = basins.labels == local
    return InstanceBasins(masks)


class BasinBox(NamedTuple):
    box: RBox
    pixels: np.ndarray
    degenerate: bool


def fit_basin_boxes(basins: LabelMap | InstanceBasins) -> list[BasinBox]:
    """One min-area rectangle per instance, with the instance's pixel centers.

    Instances with fewer than 3 non-collinear pixels get a 1x1 box at their
    centroid and ``degenerate=True``.
    """
    if isinstance(basins, LabelMap):
        basins = InstanceBasins.from_label_map(basins)
    if basins.num_instances == 0:
        raise DegenerateInputError("no instance basins")
    out = []
    for k, m in enumerate(basins.masks):
        pts = pixel_centers(m)
        ext = row_extreme_centers(m)
        if len(pts) == 0 or is_degenerate(ext):
            c = pts.mean(axis=0) if len(pts) else (np.nan, np.nan)
            log.warning("instance %d has a degenerate basin (%d px)", k, len(pts))
            out.append(BasinBox(RBox(c[0], c[1], 1.0, 1.0, 0.0), pts, True))
        else:
            out.append(BasinBox(min_area_rect(ext), pts, False))
    return out


def basins_to_pseudo_rboxes(basins: LabelMap | InstanceBasins) -> list[RBox]:
    return [b.box for b in fit_basin_boxes(basins)]
