import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_box
from rqdet.geometry import (DegenerateQuad, GeometryError, LengthMismatch, RotatedBox,
                            box_to_corners, corners_array, corners_to_box, iou_matrix,
                            normalize_boxes, paired_iou, rotated_iou, rotated_iou_rasterized,
                            rotated_nms, wrap_angle)

finite = st.floats(-50, 50, allow_nan=False)
side = st.floats(0.5, 40, allow_nan=False)
angle = st.floats(-4, 4, allow_nan=False)
box_st = st.builds(RotatedBox, finite, finite, side, side, angle)


def test_box_rejects_bad_fields():
    with pytest.raises(GeometryError):
        RotatedBox(0, 0, 0, 1, 0)
    with pytest.raises(GeometryError):
        RotatedBox(0, 0, 1, float("nan"), 0)


@given(box_st)
def test_normalize_long_edge(b):
    n = b.normalize()
    assert n.w >= n.h
    assert -math.pi / 2 <= n.theta < math.pi / 2
    assert n.area == pytest.approx(b.area)
    # same point set
    assert rotated_iou(b, n) == pytest.approx(1.0, abs=1e-6)


@given(box_st)
def test_normalize_idempotent(b):
    n = b.normalize()
    assert n.normalize() == n


def test_normalize_vectorised_matches_scalar(rng):
    arr = np.array([random_box(rng) for _ in range(200)])
    vec = normalize_boxes(arr)
    for a, v in zip(arr, vec):
        np.testing.assert_allclose(RotatedBox.from_array(a).normalize().to_array(), v, atol=1e-12)


def test_wrap_angle_range():
    t = wrap_angle(np.linspace(-10, 10, 1001))
    assert np.all(t >= -math.pi / 2) and np.all(t < math.pi / 2)


def test_corners_ccw_and_area():
    b = RotatedBox(3, 4, 6, 2, 0.3)
    p = box_to_corners(b)
    assert p.area == pytest.approx(12.0)
    np.testing.assert_allclose(p.centroid, [3, 4])


def test_corners_axis_aligned():
    c = corners_array([0, 0, 4, 2, 0])[0]
    np.testing.assert_allclose(c, [[-2, -1], [2, -1], [2, 1], [-2, 1]])


@given(box_st)
def test_corners_roundtrip(b):
    back = corners_to_box(box_to_corners(b))
    n = b.normalize()
    np.testing.assert_allclose([back.cx, back.cy, back.w, back.h], [n.cx, n.cy, n.w, n.h],
                               atol=1e-6 * max(1, n.w))
    assert rotated_iou(back, n) == pytest.approx(1.0, abs=1e-6)


def test_corners_to_box_degenerate():
    with pytest.raises(DegenerateQuad):
        corners_to_box([[0, 0], [1, 1], [2, 2], [0, 1]])
    with pytest.raises(DegenerateQuad):
        corners_to_box([[0, 0], [1, 0], [1, 1]])


def test_iou_analytic_rotated_square():
    a = RotatedBox(0, 0, 2, 2, 0)
    b = RotatedBox(0, 0, 2, 2, math.pi / 4)
    # octagon of area 8(sqrt2 - 1); union 8 - that
    inter = 8 * (math.sqrt(2) - 1)
    assert rotated_iou(a, b) == pytest.approx(inter / (8 - inter), abs=1e-12)


def test_iou_disjoint_and_identical():
    a = RotatedBox(0, 0, 2, 2, 0)
    assert rotated_iou(a, RotatedBox(10, 0, 2, 2, 0)) == 0.0
    assert rotated_iou(a, a) == 1.0


def test_iou_contained():
    a = RotatedBox(0, 0, 4, 4, 0.2)
    b = RotatedBox(0, 0, 1, 1, 1.0)
    assert rotated_iou(a, b) == pytest.approx(1 / 16)


@given(box_st, box_st)
def test_iou_symmetric_bounded(a, b):
    x, y = rotated_iou(a, b), rotated_iou(b, a)
    assert x == y
    assert 0.0 <= x <= 1.0


def test_iou_matches_list_clipper(rng):
    for _ in range(300):
        a, b = random_box(rng), random_box(rng, span=40)
        assert rotated_iou(RotatedBox.from_array(a), RotatedBox.from_array(b)) == pytest.approx(
            oracles.clip_iou(a, b), abs=1e-9)


def test_vectorised_matches_scalar(rng):
    a = np.array([random_box(rng, span=40) for _ in range(400)])
    b = np.array([random_box(rng, span=40) for _ in range(400)])
    vec = paired_iou(a, b)
    ref = [rotated_iou(RotatedBox.from_array(x), RotatedBox.from_array(y)) for x, y in zip(a, b)]
    np.testing.assert_allclose(vec, ref, atol=1e-9)


def test_iou_matrix_shape(rng):
    a = np.array([random_box(rng) for _ in range(3)])
    b = np.array([random_box(rng) for _ in range(4)])
    m = iou_matrix(a, b)
    assert m.shape == (3, 4)
    assert iou_matrix(a, np.zeros((0, 5))).shape == (3, 0)


def test_scanline_raster_matches_pixel_raster(rng):
    for _ in range(40):
        a, b = random_box(rng, span=30), random_box(rng, span=30)
        fast = rotated_iou_rasterized(RotatedBox.from_array(a), RotatedBox.from_array(b), 300)
        assert fast == pytest.approx(oracles.raster_iou(a, b, 300), abs=1e-3)


def test_raster_grid_floor():
    with pytest.raises(ValueError):
        rotated_iou_rasterized(RotatedBox(0, 0, 1, 1), RotatedBox(0, 0, 1, 1), 10)


def test_nms_matches_oracle(rng):
    for _ in range(60):
        n = rng.integers(0, 25)
        boxes = [random_box(rng, lo=5, hi=30, span=50) for _ in range(n)]
        scores = rng.integers(0, 5, n).astype(float)  # many ties
        t = float(rng.uniform(0.1, 0.9))
        assert rotated_nms(boxes, scores, t) == oracles.nms(boxes, scores, t)


def test_nms_ties_by_index():
    b = [[0, 0, 10, 10, 0]] * 3
    assert rotated_nms(b, [1.0, 1.0, 1.0], 0.5) == [0]
    assert rotated_nms(b, [0.5, 1.0, 1.0], 0.5) == [1]


def test_nms_kept_pairs_below_threshold(rng):
    boxes = np.array([random_box(rng, span=40) for _ in range(80)])
    keep = rotated_nms(boxes, rng.random(80), 0.3)
    m = iou_matrix(boxes[keep], boxes[keep])
    np.fill_diagonal(m, 0)
    assert m.max() <= 0.3


def test_nms_errors():
    with pytest.raises(LengthMismatch):
        rotated_nms([[0, 0, 1, 1, 0]], [1, 2], 0.5)
    with pytest.raises(ValueError):
        rotated_nms([[0, 0, 1, 1, 0]], [1], 0.0)
    assert rotated_nms([], [], 0.5) == []
