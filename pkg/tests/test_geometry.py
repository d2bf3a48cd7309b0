import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pseudorbox.geometry import (
    AnnotatedPoint,
    BinaryMask,
    DegenerateInputError,
    Gaussian2,
    LabelMap,
    Point2,
    RBox,
    clip_convex,
    convex_hull,
    gaussian_to_rbox,
    is_degenerate,
    mask_stats,
    min_area_rect,
    min_enclosing_circle,
    polygon_area,
    rbox_iou,
    rbox_to_gaussian,
    row_extreme_centers,
    wrap_angle,
)

coord = st.floats(-100, 100, allow_nan=False)
side = st.floats(0.5, 50)
angle = st.floats(-4, 4)


def brute_rect_area(pts, step_deg=0.5):
    best = math.inf
    for a in np.deg2rad(np.arange(0, 90, step_deg)):
        c, s = math.cos(a), math.sin(a)
        u = pts[:, 0] * c + pts[:, 1] * s
        v = -pts[:, 0] * s + pts[:, 1] * c
        best = min(best, np.ptp(u) * np.ptp(v))
    return best


def brute_circle_radius(pts):
    """Smallest circle through 2 or 3 of the points that contains them all."""
    best = math.inf
    cands = []
    for a, b in itertools.combinations(pts, 2):
        cands.append(((a + b) / 2, np.linalg.norm(a - b) / 2))
    for a, b, c in itertools.combinations(pts, 3):
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if abs(d) < 1e-12:
            continue
        ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
        uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
        ctr = np.array([ux, uy])
        cands.append((ctr, np.linalg.norm(a - ctr)))
    for ctr, r in cands:
        if np.all(np.linalg.norm(pts - ctr, axis=1) <= r + 1e-9):
            best = min(best, r)
    return best


# -- RBox ---------------------------------------------------------------------


def test_rbox_long_edge_normalization():
    b = RBox(0, 0, 4, 10, 0)
    assert (b.w, b.h) == (10, 4)
    assert b.theta == pytest.approx(-math.pi / 2)


def test_rbox_rejects_nonpositive_sides():
    with pytest.raises(ValueError):
        RBox(0, 0, 0, 1, 0)
    with pytest.raises(ValueError):
        RBox(0, 0, 1, -2, 0)


def test_annotated_point_rejects_negative_class():
    with pytest.raises(ValueError):
        AnnotatedPoint(Point2(1, 2), -1)


@given(coord, coord, side, side, angle)
def test_normalization_keeps_the_same_rectangle(cx, cy, w, h, theta):
    b = RBox(cx, cy, w, h, theta)
    assert b.w >= b.h and -math.pi / 2 <= b.theta < math.pi / 2
    c, s = math.cos(theta), math.sin(theta)
    raw = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]) @ np.array([[c, s], [-s, c]]) + [cx, cy]
    got = b.corners()
    for p in raw:
        assert np.min(np.linalg.norm(got - p, axis=1)) < 1e-7 * max(1, abs(cx), abs(cy), w)


@given(st.floats(-50, 50))
def test_wrap_angle_range_and_period(theta):
    w = wrap_angle(theta)
    assert -math.pi / 2 <= w < math.pi / 2
    assert math.isclose(math.sin(2 * w), math.sin(2 * theta), abs_tol=1e-9)


# -- Gaussian conversion --------------------------------------------------------


def test_isotropic_gaussian_maps_to_square_at_zero_angle():
    b = gaussian_to_rbox(Gaussian2(np.zeros(2), 9 * np.eye(2)))
    assert (b.w, b.h, b.theta) == pytest.approx((6, 6, 0))


def test_rbox_to_gaussian_axis_aligned():
    g = rbox_to_gaussian(RBox(1, 2, 10, 4, 0))
    np.testing.assert_allclose(g.sigma, np.diag([25, 4]))
    np.testing.assert_allclose(g.mu, [1, 2])


@given(coord, coord, side, st.floats(0.5, 0.95), angle)
def test_gaussian_round_trip(cx, cy, w, ratio, theta):
    b = RBox(cx, cy, w, w * ratio, theta)
    back = gaussian_to_rbox(rbox_to_gaussian(b))
    assert back.as_tuple()[:4] == pytest.approx(b.as_tuple()[:4], rel=1e-6, abs=1e-6)
    assert abs(wrap_angle(back.theta - b.theta)) < 1e-6


def test_gaussian_to_rbox_rejects_non_spd():
    with pytest.raises(ValueError):
        gaussian_to_rbox(Gaussian2(np.zeros(2), np.diag([1.0, -1.0])))


# -- min-area rectangle ------------------------------------------------------------


def test_min_area_rect_axis_aligned_corners():
    pts = [(-5, -2), (5, -2), (5, 2), (-5, 2)]
    assert min_area_rect(pts).as_tuple() == pytest.approx((0, 0, 10, 4, 0), abs=1e-9)


def test_min_area_rect_rotated_corners():
    r = np.array([[math.cos(math.pi / 6), -math.sin(math.pi / 6)], [math.sin(math.pi / 6), math.cos(math.pi / 6)]])
    pts = np.array([(-5, -2), (5, -2), (5, 2), (-5, 2)]) @ r.T
    assert min_area_rect(pts).as_tuple() == pytest.approx((0, 0, 10, 4, math.pi / 6), abs=1e-9)


@pytest.mark.parametrize("pts", [[(0, 0), (1, 1)], [(0, 0), (1, 1), (2, 2), (3, 3)], [(1, 1)] * 5])
def test_min_area_rect_degenerate(pts):
    with pytest.raises(DegenerateInputError):
        min_area_rect(pts)


@given(st.lists(st.tuples(coord, coord), min_size=3, max_size=40))
def test_min_area_rect_contains_and_beats_sweep(pts):
    pts = np.array(pts)
    if is_degenerate(pts):
        return
    box = min_area_rect(pts)
    loc = np.abs(box.to_local(pts))
    tol = 1e-7 * max(1.0, np.abs(pts).max())
    assert np.all(loc[:, 0] <= box.w / 2 + tol) and np.all(loc[:, 1] <= box.h / 2 + tol)
    assert box.area <= brute_rect_area(pts) * (1 + 1e-6) + 1e-9


# -- enclosing circle ---------------------------------------------------------------


def test_circle_of_unit_square():
    c, r = min_enclosing_circle([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert (c.x, c.y, r) == pytest.approx((0.5, 0.5, math.sqrt(2) / 2))


def test_circle_single_point():
    c, r = min_enclosing_circle([(3, 4)])
    assert (c.x, c.y, r) == (3, 4, 0)


def test_circle_empty():
    with pytest.raises(DegenerateInputError):
        min_enclosing_circle(np.zeros((0, 2)))


@given(st.lists(st.tuples(coord, coord), min_size=2, max_size=9))
def test_circle_encloses_and_is_minimal(pts):
    pts = np.array(pts, dtype=float)
    c, r = min_enclosing_circle(pts)
    assert np.all(np.linalg.norm(pts - np.array(c), axis=1) <= r + 1e-7)
    best = brute_circle_radius(pts)
    if math.isfinite(best):
        assert r <= best + 1e-7


# -- polygons and IoU ------------------------------------------------------------------


def test_iou_half_overlap():
    assert rbox_iou(RBox(0, 0, 2, 2, 0), RBox(1, 0, 2, 2, 0)) == pytest.approx(1 / 3)


def test_iou_identity_and_disjoint():
    b = RBox(3, 4, 7, 2, 0.4)
    assert rbox_iou(b, b) == pytest.approx(1.0)
    assert rbox_iou(b, RBox(100, 100, 7, 2, 0.4)) == 0.0


def test_iou_rotated_square_analytic():
    # square rotated 45 deg over the same square: intersection is a regular octagon
    a = RBox(0, 0, 2, 2, 0)
    b = RBox(0, 0, 2, 2, math.pi / 4)
    octagon = 8 * (math.sqrt(2) - 1)
    assert rbox_iou(a, b) == pytest.approx(octagon / (8 - octagon))


@given(coord, coord, side, side, angle, st.floats(-10, 10), st.floats(-10, 10), side, side, angle)
def test_iou_symmetric_and_matches_raster(cx, cy, w, h, t, dx, dy, w2, h2, t2):
    a = RBox(cx, cy, w, h, t)
    b = RBox(cx + dx, cy + dy, w2, h2, t2)
    iou = rbox_iou(a, b)
    assert 0 <= iou <= 1
    assert iou == pytest.approx(rbox_iou(b, a), abs=1e-9)
    # intersection area against dense sampling
    lo = np.minimum(a.corners().min(0), b.corners().min(0))
    hi = np.maximum(a.corners().max(0), b.corners().max(0))
    n = 400
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    grid = np.stack(np.meshgrid(xs, ys), -1)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    inter = (a.contains(grid) & b.contains(grid)).sum() * cell
    exact = polygon_area(clip_convex(a.corners(), b.corners()))
    assert exact == pytest.approx(inter, abs=0.02 * (hi - lo).prod() ** 0.5 * max(w, h, w2, h2) + 1e-9)


def test_convex_hull_ccw_square():
    hull = convex_hull(np.array([(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)], dtype=float))
    assert len(hull) == 4
    x, y = hull[:, 0], hull[:, 1]
    assert np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) > 0


# -- rasters ---------------------------------------------------------------------------


def test_binary_mask_outline_fits_pixel_squares():
    bits = np.zeros((20, 30), bool)
    bits[5:9, 10:20] = True
    box = min_area_rect(BinaryMask(bits).outline_corners())
    assert box.as_tuple() == pytest.approx((15, 7, 10, 4, 0), abs=1e-9)


def test_row_extremes_span_hull_of_centers():
    rng = np.random.default_rng(0)
    bits = rng.random((25, 25)) > 0.6
    full = BinaryMask(bits).pixel_centers()
    ext = row_extreme_centers(bits)
    assert min_area_rect(ext).area == pytest.approx(min_area_rect(full).area)


def test_mask_stats_centroid():
    bits = np.zeros((10, 10), bool)
    bits[2:4, 6:8] = True
    area, c = mask_stats(BinaryMask(bits))
    assert area == 4 and c == (7.0, 3.0)
    with pytest.raises(DegenerateInputError):
        mask_stats(BinaryMask(np.zeros((3, 3), bool)))


def test_label_map_counts_instances():
    lm = LabelMap(np.array([[0, 1], [2, 2]]))
    assert lm.num_instances == 2 and lm.instance_mask(2).sum() == 2
