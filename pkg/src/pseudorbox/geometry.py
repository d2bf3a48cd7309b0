"""Rotated boxes, 2-D Gaussians, raster masks and the exact geometry between them.

Coordinate convention: pixel ``(col, row)`` covers the unit square
``[col, col + 1) x [row, row + 1)`` and is represented by its center
``(col + 0.5, row + 0.5)``.  Angles are radians, counter-clockwise in the
image frame (x right, y down), and boxes use the long-edge definition:
``w >= h`` and ``theta`` in ``[-pi/2, pi/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

HALF_PI = math.pi / 2
ISOTROPY_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Raised when an operation receives too few (or collinear) points."""


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class AnnotatedPoint:
    point: Point2
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        object.__setattr__(self, "point", Point2(float(self.point[0]), float(self.point[1])))


def wrap_angle(theta: float, period: float = math.pi) -> float:
    """Wrap ``theta`` into ``[-period/2, period/2)``."""
    half = period / 2
    out = (theta + half) % period - half
    # float modulo may land exactly on +half
    if out >= half:
        out -= period
    return out


@dataclass(frozen=True)
class RBox:
    """Rotated box, normalized on construction to the long-edge convention."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        w, h, theta = float(self.w), float(self.h), float(self.theta)
        if w < h:
            w, h, theta = h, w, theta + HALF_PI
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", wrap_angle(theta))

    @property
    def center(self) -> Point2:
        return Point2(self.cx, self.cy)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def corners(self) -> np.ndarray:
        """Corners as a ``(4, 2)`` array, counter-clockwise from ``(-w/2, -h/2)``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw, hh = self.w / 2, self.h / 2
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """Express points in the box frame (``R^T (p - center)``)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        d = np.asarray(pts, dtype=float) - np.array([self.cx, self.cy])
        return np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c], axis=-1)

    def contains(self, pts: np.ndarray, strict: bool = True) -> np.ndarray:
        loc = np.abs(self.to_local(pts))
        hw, hh = self.w / 2, self.h / 2
        if strict:
            return (loc[..., 0] < hw) & (loc[..., 1] < hh)
        return (loc[..., 0] <= hw) & (loc[..., 1] <= hh)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class Gaussian2:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(2)
        sigma = np.asarray(self.sigma, dtype=float).reshape(2, 2)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def check_spd(self) -> None:
        """Raise ``ValueError`` unless ``sigma`` is symmetric positive-definite."""
        s = self.sigma
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(self.mu)):
            raise ValueError("Gaussian has non-finite entries")
        if abs(s[0, 1] - s[1, 0]) > 1e-9 * max(1.0, np.abs(s).max()):
            raise ValueError("covariance is not symmetric")
        if not (s[0, 0] > 0 and s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0] > 0):
            raise ValueError("covariance is not positive-definite")


def rbox_to_gaussian(box: RBox) -> Gaussian2:
    r = rotation(box.theta)
    d = np.diag([(box.w / 2) ** 2, (box.h / 2) ** 2])
    sigma = r @ d @ r.T
    sigma = (sigma + sigma.T) / 2
    return Gaussian2(np.array([box.cx, box.cy]), sigma)


def gaussian_to_rbox(g: Gaussian2) -> RBox:
    """Inverse of :func:`rbox_to_gaussian`.

    Near-isotropic covariances (eigenvalue ratio below ``1 + 1e-9``) get
    ``theta = 0`` so square objects map to a deterministic box.
    """
    g.check_spd()
    vals, vecs = np.linalg.eigh(g.sigma)
    lo, hi = vals
    w, h = 2 * math.sqrt(hi), 2 * math.sqrt(lo)
    if hi / lo < 1 + ISOTROPY_TOL:
        theta = 0.0
    else:
        major = vecs[:, 1]
        theta = math.atan2(major[1], major[0])
    return RBox(g.mu[0], g.mu[1], w, h, theta)


# --------------------------------------------------------------------------
# point-set geometry


def _as_points(pixels: Iterable | np.ndarray) -> np.ndarray:
    pts = np.asarray(pixels if isinstance(pixels, np.ndarray) else list(pixels), dtype=float)
    if pts.size == 0:
        return pts.reshape(0, 2)
    return pts.reshape(-1, 2)


def convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise, no repeats."""
    pts = np.unique(_as_points(pts), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(pixels) -> RBox:
    """Minimum-area enclosing rotated rectangle.

    Uses the convex hull and the fact that an optimal rectangle is flush
    with one hull edge; every edge orientation is evaluated exactly.

    Raises:
        DegenerateInputError: fewer than 3 points, or all points collinear.
    """
    pts = _as_points(pixels)
    if len(pts) < 3:
        raise DegenerateInputError(f"min_area_rect needs >= 3 points, got {len(pts)}")
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise DegenerateInputError("min_area_rect input is collinear")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    keep = lengths > 0
    u = edges[keep] / lengths[keep, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T
    pv = hull @ v.T
    umin, umax = pu.min(axis=0), pu.max(axis=0)
    vmin, vmax = pv.min(axis=0), pv.max(axis=0)
    areas = (umax - umin) * (vmax - vmin)
    k = int(np.argmin(areas))
    cu, cv = (umin[k] + umax[k]) / 2, (vmin[k] + vmax[k]) / 2
    center = cu * u[k] + cv * v[k]
    theta = math.atan2(u[k, 1], u[k, 0])
    return RBox(center[0], center[1], umax[k] - umin[k], vmax[k] - vmin[k], theta)


def _circle_two(a, b):
    c = (a + b) / 2
    return c, math.hypot(*(a - c))


def _circle_three(a, b, c):
    bx, by = b - a
    cx, cy = c - a
    d = 2 * (bx * cy - by * cx)
    if d == 0:
        # collinear: widest pair
        pairs = [(a, b), (a, c), (b, c)]
        return max((_circle_two(p, q) for p, q in pairs), key=lambda t: t[1])
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    center = a + np.array([ux, uy])
    return center, math.hypot(ux, uy)


def min_enclosing_circle(pixels) -> tuple[Point2, float]:
    """Smallest enclosing circle (Welzl's incremental algorithm, fixed shuffle).

    The support points of the optimal circle lie on the convex hull, so the
    incremental pass runs over hull vertices only.
    """
    pts = _as_points(pixels)
    if len(pts) == 0:
        raise DegenerateInputError("min_enclosing_circle needs at least one point")
    hull = convex_hull(pts)
    if len(hull) == 1:
        return Point2(*hull[0]), 0.0
    order = np.random.default_rng(0).permutation(len(hull))
    p = hull[order]
    eps = 1e-12

    def inside(center, r, q):
        return math.hypot(*(q - center)) <= r * (1 + eps) + eps

    c, r = p[0].copy(), 0.0
    for i in range(1, len(p)):
        if inside(c, r, p[i]):
            continue
        c, r = p[i].copy(), 0.0
        for j in range(i):
            if inside(c, r, p[j]):
                continue
            c, r = _circle_two(p[i], p[j])
            for k in range(j):
                if not inside(c, r, p[k]):
                    c, r = _circle_three(p[i], p[j], p[k])
    return Point2(float(c[0]), float(c[1])), float(r)


# --------------------------------------------------------------------------
# polygons


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [np.asarray(p, dtype=float) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        src, out = out, []
        for j in range(len(src)):
            cur, prev = src[j], src[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return np.array(out).reshape(-1, 2)


def rbox_iou(a: RBox, b: RBox) -> float:
    inter = polygon_area(clip_convex(a.corners(), b.corners()))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


# --------------------------------------------------------------------------
# rasters


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Single-instance mask; ``bits`` is a ``(height, width)`` bool array."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.ascontiguousarray(self.bits, dtype=bool))
        if self.bits.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def pixel_centers(self) -> np.ndarray:
        rows, cols = np.nonzero(self.bits)
        return np.stack([cols + 0.5, rows + 0.5], axis=1)

    def outline_corners(self) -> np.ndarray:
        """Pixel-square corners that can lie on the mask's convex hull.

        Per row only the leftmost and rightmost set pixels matter, so this
        returns at most four corners per occupied row.
        """
        rows = np.nonzero(self.bits.any(axis=1))[0]
        if len(rows) == 0:
            return np.zeros((0, 2))
        sub = self.bits[rows]
        left = sub.argmax(axis=1)
        right = self.width - 1 - sub[:, ::-1].argmax(axis=1)
        r = rows.astype(float)
        pts = [
            np.stack([left, r], 1), np.stack([left, r + 1], 1),
            np.stack([right + 1.0, r], 1), np.stack([right + 1.0, r + 1], 1),
        ]
        return np.concatenate(pts).astype(float)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel instance labels: 0 is background/ridge, ``k >= 1`` is instance k."""

    labels: np.ndarray
    num_instances: int = field(default=-1)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        object.__setattr__(self, "labels", labels)
        if self.num_instances < 0:
            object.__setattr__(self, "num_instances", int(labels.max(initial=0)))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def instance_mask(self, k: int) -> np.ndarray:
        return self.labels == k


def pixel_centers(bits: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(bits)
    return np.stack([cols + 0.5, rows + 0.5], axis=1).astype(float)


def row_extreme_centers(bits: np.ndarray) -> np.ndarray:
    """Centers of the leftmost and rightmost set pixel of every row.

    These are a superset of the convex-hull vertices of all set-pixel centers.
    """
    rows = np.nonzero(bits.any(axis=1))[0]
    if len(rows) == 0:
        return np.zeros((0, 2))
    sub = bits[rows]
    left = sub.argmax(axis=1)
    right = bits.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    pts = np.concatenate([np.stack([left, rows], 1), np.stack([right, rows], 1)])
    return np.unique(pts, axis=0).astype(float) + 0.5


def mask_stats(mask: BinaryMask) -> tuple[float, Point2]:
    rows, cols = np.nonzero(mask.bits)
    n = len(rows)
    if n == 0:
        raise DegenerateInputError("mask has no set pixels")
    return float(n), Point2(float(cols.sum()) / n + 0.5, float(rows.sum()) / n + 0.5)


def is_degenerate(pts: Sequence | np.ndarray) -> bool:
    """True when fewer than 3 distinct non-collinear points are present."""
    return len(convex_hull(_as_points(pts))) < 3
