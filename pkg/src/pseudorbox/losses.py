"""Closed-form loss evaluators on boxes, Gaussians and pixel sets.

These are forward evaluators only (no gradients); every function is pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .geometry import DegenerateInputError, Gaussian2, Point2, RBox, rotation, wrap_angle


class RegressionTarget(NamedTuple):
    w_t: float
    h_t: float


@dataclass(frozen=True)
class LossWeights:
    pgdm: float = 1.0
    overlap: float = 1.0
    edge: float = 1.0
    consistency: float = 1.0

    def __post_init__(self):
        for name in ("pgdm", "overlap", "edge", "consistency"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative")


@dataclass(frozen=True)
class AugmentTransform:
    """Rotation by ``rotation``, optional horizontal flip, uniform ``scale``.

    ``linear = scale * R(rotation) @ diag(flip_sign, 1)``; a box at angle
    ``theta`` maps to angle ``flip_sign * theta + rotation``.
    """

    rotation: float = 0.0
    flip_sign: int = 1
    scale: float = 1.0
    linear: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.flip_sign not in (1, -1):
            raise ValueError("flip_sign must be +1 or -1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        lin = self.scale * rotation(self.rotation) @ np.diag([float(self.flip_sign), 1.0])
        object.__setattr__(self, "linear", lin)

    def apply_box(self, box: RBox, origin=(0.0, 0.0)) -> RBox:
        """Transform a box about ``origin``."""
        o = np.asarray(origin, dtype=float)
        c = self.linear @ (np.array([box.cx, box.cy]) - o) + o
        return RBox(c[0], c[1], box.w * self.scale, box.h * self.scale,
                    self.flip_sign * box.theta + self.rotation)


# --------------------------------------------------------------------------
# Gaussian distances


def _spd(g: Gaussian2) -> Gaussian2:
    try:
        g.check_spd()
    except ValueError as e:
        raise ValueError(f"domain error: {e}") from None
    return g


def sqrtm_2x2(m: np.ndarray) -> np.ndarray:
    """Principal square root of a 2x2 symmetric positive semi-definite matrix."""
    det = max(0.0, m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])
    s = math.sqrt(det)
    t = math.sqrt(max(0.0, m[0, 0] + m[1, 1] + 2 * s))
    if t == 0:
        return np.zeros((2, 2))
    return (m + s * np.eye(2)) / t


def bures_sq(s1: np.ndarray, s2: np.ndarray) -> float:
    """``Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`` for PSD 2x2 covariances.

    Evaluated as ``||A - B U||_F^2`` with ``A, B`` the matrix square roots and
    ``U`` the optimal orthogonal alignment, which keeps it accurate (and
    non-negative) when the two covariances are nearly identical.
    """
    a, b = sqrtm_2x2(s1), sqrtm_2x2(s2)
    wl, _, vt = np.linalg.svd(b.T @ a)
    u = wl @ vt
    return float(np.sum((a - b @ u) ** 2))


def gwd_distance_sq(a: Gaussian2, b: Gaussian2) -> float:
    _spd(a), _spd(b)
    dmu = a.mu - b.mu
    return float(dmu @ dmu) + bures_sq(a.sigma, b.sigma)


def gwd_transform(distance_sq: float) -> float:
    return math.log1p(math.sqrt(max(0.0, distance_sq)))


def gwd_loss(a: Gaussian2, b: Gaussian2) -> float:
    """``log(1 + sqrt(W2^2))``."""
    return gwd_transform(gwd_distance_sq(a, b))


def bhattacharyya_coeff(a: Gaussian2, b: Gaussian2) -> float:
    _spd(a), _spd(b)
    mean_cov = (a.sigma + b.sigma) / 2
    dmu = a.mu - b.mu
    maha = float(dmu @ np.linalg.solve(mean_cov, dmu))
    det_m = np.linalg.det(mean_cov)
    det_ab = np.linalg.det(a.sigma) * np.linalg.det(b.sigma)
    db = maha / 8 + 0.5 * math.log(det_m / math.sqrt(det_ab))
    return min(1.0, math.exp(-db))


def gaussian_overlap_loss(instances: Sequence[Gaussian2]) -> float:
    """``(1/N) * sum_{i != j} BC(i, j)`` over ordered pairs."""
    n = len(instances)
    if n <= 1:
        return 0.0
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += 2 * bhattacharyya_coeff(instances[i], instances[j])
    return total / n


# --------------------------------------------------------------------------
# mask regression


def mask_regression_targets(pixels, center: Point2, theta: float) -> RegressionTarget:
    """Twice the largest absolute offset along each box axis.

    ``pixels`` are point coordinates (pixel centers for raster masks).
    """
    pts = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise DegenerateInputError("mask_regression_targets needs a non-empty pixel set")
    c, s = math.cos(theta), math.sin(theta)
    dx = pts[:, 0] - center[0]
    dy = pts[:, 1] - center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return RegressionTarget(2 * float(np.abs(u).max()), 2 * float(np.abs(v).max()))


def size_gaussian(w: float, h: float) -> Gaussian2:
    return Gaussian2(np.zeros(2), np.diag([(w / 2) ** 2, (h / 2) ** 2]))


def l_mask(pred_w: float, pred_h: float, target: RegressionTarget) -> float:
    """GWD loss between the predicted and target axis-aligned size Gaussians."""
    dims = (pred_w, pred_h, target[0], target[1])
    if not all(d > 0 for d in dims):
        raise ValueError(f"domain error: l_mask needs positive dimensions, got {dims}")
    return gwd_loss(size_gaussian(pred_w, pred_h), size_gaussian(target[0], target[1]))


def l_pgdm(per_instance: Sequence[float]) -> float:
    """Mean per-instance mask loss; an image without instances contributes 0."""
    if len(per_instance) == 0:
        return 0.0
    return float(sum(per_instance)) / len(per_instance)


# --------------------------------------------------------------------------
# edge loss


def smooth_l1(pred: float, target: float, beta: float = 1.0) -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = abs(pred - target)
    if d < beta:
        return 0.5 * d * d / beta
    return d - 0.5 * beta


def edge_map(gray: np.ndarray, smoothing: float = 1.0) -> np.ndarray:
    """Sobel gradient magnitude normalized to [0, 1]."""
    img = np.asarray(gray, dtype=float)
    if smoothing > 0:
        img = ndimage.gaussian_filter(img, smoothing, mode="nearest")
    mag = np.hypot(ndimage.sobel(img, axis=1, mode="nearest"), ndimage.sobel(img, axis=0, mode="nearest"))
    peak = mag.max(initial=0.0)
    return mag / peak if peak > 0 else mag


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    # pixel value lives at its center
    fx = np.clip(x - 0.5, 0, w - 1)
    fy = np.clip(y - 0.5, 0, h - 1)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    return ((img[y0, x0] * (1 - ax) + img[y0, x1] * ax) * (1 - ay)
            + (img[y1, x0] * (1 - ax) + img[y1, x1] * ax) * ay)


def _outer_span(profile: np.ndarray, coords: np.ndarray, frac: float) -> float | None:
    peak = profile.max(initial=0.0)
    if peak <= 0:
        return None
    idx = np.flatnonzero(profile >= frac * peak)
    if len(idx) < 2:
        return None
    return float(coords[idx[-1]] - coords[idx[0]])


def edge_targets(edge: np.ndarray, box: RBox, resolution: float = 2.0, frac: float = 0.5,
                 expand: float = 1.0) -> RegressionTarget:
    """Width/height targets from the edge intensity inside a rotated box.

    The edge map is sampled on a grid aligned with the box (``resolution``
    samples per pixel, bilinear, clamped at borders, region enlarged by
    ``expand``).  Summing across each axis gives two profiles; each target is
    the distance between the outermost samples reaching ``frac`` of that
    profile's peak.  A profile with no such pair keeps the box dimension.
    """
    edge = np.asarray(edge, dtype=float)
    h_img, w_img = edge.shape
    x0, y0 = box.corners().min(axis=0)
    x1, y1 = box.corners().max(axis=0)
    if x1 <= 0 or y1 <= 0 or x0 >= w_img or y0 >= h_img:
        raise DegenerateInputError("box lies completely outside the edge map")
    bw, bh = box.w * expand, box.h * expand
    nu = max(2, int(math.ceil(resolution * bw)))
    nv = max(2, int(math.ceil(resolution * bh)))
    u = (np.arange(nu) + 0.5) / nu * bw - bw / 2
    v = (np.arange(nv) + 0.5) / nv * bh - bh / 2
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(box.theta), math.sin(box.theta)
    xs = box.cx + c * uu - s * vv
    ys = box.cy + s * uu + c * vv
    samples = _bilinear(edge, xs, ys)
    w_t = _outer_span(samples.sum(axis=0), u, frac)
    h_t = _outer_span(samples.sum(axis=1), v, frac)
    return RegressionTarget(box.w if w_t is None else w_t, box.h if h_t is None else h_t)


def edge_loss(box: RBox, target: RegressionTarget, beta: float = 1.0) -> float:
    return smooth_l1(box.w, target[0], beta) + smooth_l1(box.h, target[1], beta)


# --------------------------------------------------------------------------
# self-supervised consistency


def angle_difference(a: float, b: float) -> float:
    """Minimal ``a - b`` modulo pi, wrapped into ``(-pi/2, pi/2]``."""
    d = wrap_angle(a - b)
    return math.pi / 2 if d == -math.pi / 2 else d


def consistency_loss(sigma: np.ndarray, theta: float, sigma_aug: np.ndarray, theta_aug: float,
                     t: AugmentTransform, beta: float = 1.0) -> float:
    lin = t.linear
    moved = lin @ np.asarray(sigma, dtype=float) @ lin.T
    moved = (moved + moved.T) / 2
    g = gwd_loss(Gaussian2(np.zeros(2), moved), Gaussian2(np.zeros(2), sigma_aug))
    d_ang = angle_difference(t.flip_sign * theta + t.rotation, theta_aug)
    return g + smooth_l1(d_ang, 0.0, beta)
