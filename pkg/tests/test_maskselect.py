import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pseudorbox.geometry import BinaryMask, DegenerateInputError, Point2, min_enclosing_circle
from pseudorbox.maskselect import (
    Branch,
    ClassPrior,
    MaskCandidate,
    MetricParams,
    aspect_ratio_score,
    clipped_circle_area,
    metric_vector,
    route_image,
    score_aspect_ratio,
    score_center_alignment,
    score_circularity,
    score_color_consistency,
    score_rectangularity,
    select_best_mask,
    weighted_channel_std,
)

P = MetricParams()


def disk(n=128, r=40, cx=64, cy=64):
    ys, xs = np.mgrid[0:n, 0:n]
    return BinaryMask((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r)


def rect(n=128, r0=32, r1=96, c0=32, c1=96):
    b = np.zeros((n, n), bool)
    b[r0:r1, c0:c1] = True
    return BinaryMask(b)


# -- routing ---------------------------------------------------------------------


@pytest.mark.parametrize("count,thr,branch", [(4, 4, Branch.CANDIDATE_MASK), (5, 4, Branch.WATERSHED),
                                              (0, 0, Branch.CANDIDATE_MASK), (1, 0, Branch.WATERSHED)])
def test_route_examples(count, thr, branch):
    assert route_image(count, thr).branch is branch


@given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 20))
def test_route_monotone(n, extra, thr):
    if route_image(n, thr).branch is Branch.WATERSHED:
        assert route_image(n + extra, thr).branch is Branch.WATERSHED


def test_route_rejects_negative():
    with pytest.raises(ValueError):
        route_image(-1, 4)


# -- center alignment --------------------------------------------------------------


def test_alignment_center_outside_and_one_sigma():
    m = rect()
    diag = math.hypot(128, 128)
    assert score_center_alignment(m, Point2(64, 64), diag, P) == pytest.approx(1.0)
    assert score_center_alignment(m, Point2(5, 5), diag, P) == 0.0
    sigma = P.sigma_c_factor * diag
    assert score_center_alignment(m, Point2(64 + sigma, 64), diag, P) == pytest.approx(math.exp(-0.5))


# -- color consistency ----------------------------------------------------------------


def test_color_uniform_is_one():
    img = np.full((128, 128, 3), 77, np.uint8)
    assert score_color_consistency(img, rect(), Point2(64, 64), P) == pytest.approx(1.0)


def test_color_half_black_half_white_uniform_limit():
    img = np.zeros((128, 128, 3))
    img[:, 64:] = 255
    # huge sigma_c: weights become uniform
    p = MetricParams(sigma_c_factor=1e6, lambda_color=30)
    assert score_color_consistency(img, rect(), Point2(64, 64), p) == pytest.approx(math.exp(-4.25))


@given(st.integers(0, 2 ** 32 - 1))
def test_color_matches_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = 20, 24
    img = rng.integers(0, 256, (h, w, 3)).astype(float)
    bits = rng.random((h, w)) > 0.5
    bits[3, 3] = True
    prompt = Point2(rng.uniform(0, w), rng.uniform(0, h))
    sigma_c = P.sigma_c_factor * math.hypot(w, h)
    stds = []
    for ch in range(3):
        num = den = 0.0
        for r in range(h):
            for c in range(w):
                if bits[r, c]:
                    wt = math.exp(-((c + 0.5 - prompt.x) ** 2 + (r + 0.5 - prompt.y) ** 2) / (2 * sigma_c ** 2))
                    num += wt * img[r, c, ch]
                    den += wt
        if den == 0:
            return  # underflow regime handled by the uniform fallback
        mean = num / den
        var = sum(math.exp(-((c + 0.5 - prompt.x) ** 2 + (r + 0.5 - prompt.y) ** 2) / (2 * sigma_c ** 2))
                  * (img[r, c, ch] - mean) ** 2 for r in range(h) for c in range(w) if bits[r, c]) / den
        stds.append(math.sqrt(var))
    expect = math.exp(-np.mean(stds) / P.lambda_color)
    assert score_color_consistency(img, BinaryMask(bits), prompt, P) == pytest.approx(expect, abs=1e-9)


def test_color_far_prompt_falls_back_to_uniform():
    img = np.zeros((64, 64))
    img[:, 32:] = 255
    m = rect(64, 0, 64, 0, 64)
    std = weighted_channel_std(img, m, Point2(1e6, 1e6), 1.0)
    assert std == pytest.approx(127.5)


# -- shape metrics ------------------------------------------------------------------------


def test_rectangularity_examples():
    assert score_rectangularity(rect()) == pytest.approx(1.0, abs=0.05)
    assert score_rectangularity(disk()) == pytest.approx(math.pi / 4, abs=0.05)
    b = np.zeros((40, 40), bool)
    b[10:20, 10:20] = True
    b[20:30, 20:30] = True
    assert score_rectangularity(BinaryMask(b)) == pytest.approx(0.5, abs=0.05)


def test_circularity_examples():
    assert score_circularity(disk()) == pytest.approx(1.0, abs=0.05)
    assert score_circularity(rect()) == pytest.approx(2 / math.pi, abs=0.05)
    b = np.zeros((60, 60), bool)
    b[29:31, 5:55] = True
    assert score_circularity(BinaryMask(b)) == pytest.approx(100 / (math.pi * 25.02 ** 2), rel=0.2)


def test_degenerate_masks_score_one():
    b = np.zeros((10, 10), bool)
    b[4, 2:8] = True
    assert score_rectangularity(BinaryMask(b)) == 1.0
    assert score_circularity(BinaryMask(b)) == 1.0


def test_border_clipping_uses_visible_area():
    # disk cut by the left border: only the in-image part of the circle counts
    m = disk(128, 30, 0, 64)
    area = m.bits.sum()
    c, r = min_enclosing_circle(m.outline_corners())
    n = 1200
    xs = (np.arange(n) + 0.5) / n * 128
    gx, gy = np.meshgrid(xs, xs)
    visible = ((gx - c.x) ** 2 + (gy - c.y) ** 2 <= r * r).sum() * (128 / n) ** 2
    assert score_circularity(m) == pytest.approx(area / visible, rel=5e-3)
    assert score_circularity(m) > 1.5 * area / (math.pi * r * r)


def test_clipped_circle_area_against_grid():
    n = 2000
    xs = (np.arange(n) + 0.5) / n * 50
    gx, gy = np.meshgrid(xs, xs * 0.8)
    inside = ((gx - 5) ** 2 + (gy - 35) ** 2 <= 12 ** 2).sum() * (50 / n) * (40 / n)
    assert clipped_circle_area(Point2(5, 35), 12, 50, 40) == pytest.approx(inside, rel=2e-3)


def test_aspect_ratio_formula():
    assert aspect_ratio_score(3, (1, 5), 1) == 1.0
    assert aspect_ratio_score(5, (1, 5), 1) == 1.0
    assert aspect_ratio_score(10, (1, 5), 1) == pytest.approx(math.exp(-1))
    assert aspect_ratio_score(1.5, (3, 5), 2) == pytest.approx(math.exp(-2 * (3 / 1.5 - 1)))


def test_aspect_ratio_from_mask():
    m = rect(128, 60, 64, 4, 124)  # 120 x 4 -> AR 30
    assert score_aspect_ratio(m, ClassPrior(), P) == pytest.approx(math.exp(-(30 / 5 - 1)))


def test_prior_validation():
    with pytest.raises(ValueError):
        ClassPrior(weights=(1, 1, 1))
    with pytest.raises(ValueError):
        ClassPrior(ar_range=(0.5, 5))
    with pytest.raises(ValueError):
        MetricParams(lambda_color=0)


@given(st.integers(0, 2 ** 32 - 1))
def test_metrics_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    bits = np.zeros((32, 32), bool)
    r0, c0 = rng.integers(0, 28, 2)
    bits[r0:r0 + rng.integers(2, 8), c0:c0 + rng.integers(2, 8)] = True
    bits |= rng.random((32, 32)) > 0.97
    img = rng.integers(0, 256, (32, 32, 3))
    v = metric_vector(BinaryMask(bits), Point2(*rng.uniform(0, 32, 2)), img, ClassPrior(), P)
    assert np.all((v >= 0) & (v <= 1))


# -- selection -------------------------------------------------------------------------------


def test_select_single_and_empty():
    img = np.zeros((128, 128, 3))
    c = MaskCandidate(rect())
    assert select_best_mask([c], Point2(64, 64), img, ClassPrior(), P).best is c
    with pytest.raises(DegenerateInputError):
        select_best_mask([], Point2(64, 64), img, ClassPrior(), P)


def test_empty_candidate_rejected():
    with pytest.raises(DegenerateInputError):
        MaskCandidate(BinaryMask(np.zeros((4, 4), bool)))


def test_rectangularity_weight_prefers_rectangle():
    img = np.zeros((128, 128, 3))
    cands = [MaskCandidate(disk()), MaskCandidate(rect())]
    choice = select_best_mask(cands, Point2(64, 64), img, ClassPrior(weights=(0, 0, 1, 0, 0)), P)
    assert choice.index == 1


def test_negative_circularity_weight_prefers_less_circular():
    img = np.zeros((128, 128, 3))
    cands = [MaskCandidate(disk()), MaskCandidate(rect())]
    circ = [score_circularity(c.mask) for c in cands]
    choice = select_best_mask(cands, Point2(64, 64), img, ClassPrior(weights=(0, 0, 0, -1, 0)), P)
    assert choice.index == int(np.argmin(circ)) == 1


def test_ties_go_to_lowest_index():
    img = np.zeros((128, 128, 3))
    cands = [MaskCandidate(rect()), MaskCandidate(rect())]
    assert select_best_mask(cands, Point2(64, 64), img, ClassPrior(), P).index == 0


def _random_candidates(rng, n):
    out = []
    for _ in range(n):
        bits = np.zeros((48, 48), bool)
        r0, c0 = rng.integers(0, 30, 2)
        bits[r0:r0 + rng.integers(3, 18), c0:c0 + rng.integers(3, 18)] = True
        if rng.random() < 0.5:
            ys, xs = np.mgrid[0:48, 0:48]
            bits |= (xs - rng.uniform(10, 38)) ** 2 + (ys - rng.uniform(10, 38)) ** 2 < rng.uniform(9, 100)
        out.append(MaskCandidate(BinaryMask(bits)))
    return out


@given(st.integers(0, 2 ** 32 - 1))
def test_selection_order_invariant(seed):
    rng = np.random.default_rng(seed)
    cands = _random_candidates(rng, 5)
    img = rng.integers(0, 256, (48, 48, 3))
    prior = ClassPrior(weights=tuple(rng.uniform(-1, 1, 5)))
    prompt = Point2(24, 24)
    a = select_best_mask(cands, prompt, img, prior, P)
    perm = rng.permutation(5)
    b = select_best_mask([cands[i] for i in perm], prompt, img, prior, P)
    if sorted(a.all_scores)[-1] != sorted(a.all_scores)[-2]:
        assert b.best is a.best
