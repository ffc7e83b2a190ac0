import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multigran import geometry
from multigran.geometry import AABox

UNIT_SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def random_star(rng, n=9, center=(0.5, 0.5), r=(0.2, 0.4)):
    """Star-shaped (hence simple) polygon with ``n`` vertices."""
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    rad = rng.uniform(*r, n)
    return np.stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang)], axis=1)


def random_box(rng):
    x0, y0 = rng.uniform(0, 10, 2)
    w, h = rng.uniform(0.1, 5, 2)
    return AABox(x0, y0, x0 + w, y0 + h)


def test_polygon_to_aabox():
    assert geometry.polygon_to_aabox(UNIT_SQUARE) == AABox(0, 0, 1, 1)
    assert geometry.polygon_to_aabox([[0, 0], [2, 0], [1, 1]]) == AABox(0, 0, 2, 1)
    flat = geometry.polygon_to_aabox([[0, 1], [1, 1], [3, 1]])
    assert flat == AABox(0, 1, 3, 1) and flat.area == 0


def test_giou_hand_cases():
    a = AABox(0, 0, 1, 1)
    assert geometry.box_giou(a, a) == 1.0
    # no overlap: IoU 0, hull 3, union 2
    assert geometry.box_giou(a, AABox(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)
    # inter 1, union 7, hull 9
    assert geometry.box_giou(AABox(0, 0, 2, 2), AABox(1, 1, 3, 3)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)
    assert 1 / 7 - 2 / 9 == pytest.approx(-5 / 63)


def test_giou_properties_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a, b = random_box(rng), random_box(rng)
        g = geometry.box_giou(a, b)
        assert g == pytest.approx(geometry.box_giou(b, a), abs=1e-12)
        assert -1 < g <= 1
        assert g <= geometry.box_iou(a, b) + 1e-12


def test_giou_equals_iou_for_nested_boxes():
    outer, inner = AABox(0, 0, 4, 4), AABox(1, 1, 2, 3)
    assert geometry.box_giou(outer, inner) == pytest.approx(geometry.box_iou(outer, inner))


def test_polygon_iou_cases():
    assert geometry.polygon_iou(UNIT_SQUARE, UNIT_SQUARE) == 1.0
    shifted = UNIT_SQUARE + [0.5, 0]
    assert geometry.polygon_iou(UNIT_SQUARE, shifted, 256) == pytest.approx(1 / 3, abs=0.01)
    assert geometry.polygon_iou(UNIT_SQUARE, UNIT_SQUARE + [3, 0]) == 0.0


def test_polygon_iou_symmetric_and_converges():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_star(rng)
        b = random_star(rng, center=rng.uniform(0.3, 0.7, 2))
        assert geometry.polygon_iou(a, b, 128) == pytest.approx(geometry.polygon_iou(b, a, 128), abs=1e-12)
        diffs = [
            abs(geometry.polygon_iou(a, b, r) - geometry.polygon_iou(a, b, 2 * r)) for r in (32, 128, 512)
        ]
        assert diffs[-1] < 0.01
        assert diffs[-1] <= diffs[0] + 1e-3


def test_resample_square_corners_and_midpoints():
    four = geometry.resample_polygon(UNIT_SQUARE, 4)
    np.testing.assert_allclose(four, UNIT_SQUARE)
    eight = geometry.resample_polygon(UNIT_SQUARE, 8)
    expected = [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5]]
    np.testing.assert_allclose(eight, expected)


def test_resample_perimeter_close_to_input():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_star(rng, n=7)
        q = geometry.resample_polygon(p, 512)
        assert geometry.perimeter(q) == pytest.approx(geometry.perimeter(p), rel=0.01)
        q16 = geometry.resample_polygon(p, 16)
        assert geometry.perimeter(q16) <= geometry.perimeter(p) + 1e-9


def test_resample_start_and_direction_invariant():
    rng = np.random.default_rng(3)
    p = random_star(rng, n=11)
    base = geometry.resample_polygon(p, 16)
    for shift in range(1, 11):
        np.testing.assert_allclose(geometry.resample_polygon(np.roll(p, shift, axis=0), 16), base, atol=1e-12)
    np.testing.assert_allclose(geometry.resample_polygon(p[::-1], 16), base, atol=1e-12)


def test_resample_rejects_bad_input():
    with pytest.raises(ValueError):
        geometry.resample_polygon(UNIT_SQUARE, 5)
    with pytest.raises(ValueError):
        geometry.resample_polygon([[1, 1], [1, 1], [1, 1]], 8)


def test_rasterize_cases():
    full = geometry.rasterize_polygon([[0, 0], [40, 0], [40, 30], [0, 30]], 30, 40)
    assert full.all()
    half = geometry.rasterize_polygon([[0, 0], [20, 0], [20, 30], [0, 30]], 30, 40)
    assert abs(half.mean() - 0.5) <= 1 / 30
    outside = geometry.rasterize_polygon([[50, 50], [60, 50], [55, 60]], 30, 40)
    assert not outside.any()


def test_rasterize_matches_even_odd_on_simple_polygon():
    # simple polygons: nonzero and even-odd agree; check against a slow ray cast
    rng = np.random.default_rng(4)
    p = random_star(rng, center=(16, 16), r=(6, 14))
    mask = geometry.rasterize_polygon(p, 32, 32)
    for r in range(32):
        for c in range(32):
            x, y = c + 0.5, r + 0.5
            inside = False
            for (x0, y0), (x1, y1) in zip(p, np.roll(p, -1, axis=0)):
                if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
                    inside = not inside
            assert bool(mask[r, c]) == inside


@settings(max_examples=30, deadline=None)
@given(s=st.floats(min_value=0.3, max_value=1.0))
def test_rasterize_area_scales_quadratically(s):
    p = np.array([[10, 12], [50, 8], [56, 40], [20, 50]], dtype=float)
    h = w = 64
    base = geometry.rasterize_polygon(p, h, w).mean()
    scaled = geometry.rasterize_polygon(p * s, h, w).mean()
    assert scaled == pytest.approx(base * s * s, abs=2 / min(h, w))


def test_mask_iou():
    a = np.zeros((4, 4))
    a[:, :2] = 1
    assert geometry.mask_iou(a, a) == 1.0
    assert geometry.mask_iou(a, 1 - a) == 0.0
    b = np.zeros((4, 4))
    b[:2, :2] = 1
    assert geometry.mask_iou(b, a) == 0.5
    assert geometry.mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        geometry.mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


def test_rle_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(10):
        m = (rng.random((7, 9)) > 0.5).astype(float)
        runs = geometry.mask_to_rle(m)
        assert sum(runs) == m.size
        np.testing.assert_array_equal(geometry.rle_to_mask(runs, 7, 9), m)
    ones = np.ones((2, 2))
    assert geometry.mask_to_rle(ones) == [0, 4]
