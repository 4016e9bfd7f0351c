import numpy as np
import pytest

from wcedet.geometry import (BoxCXCYWH, BoxXYXY, BoxError, box_to_cxcywh, box_to_xyxy,
                             giou, iou, l1_distance, normalize_box, scale_to_pixels)


def test_convert_full_image_box():
    out = box_to_xyxy(BoxCXCYWH(0.5, 0.5, 1.0, 1.0))
    assert (out.x_min, out.y_min, out.x_max, out.y_max) == (0.0, 0.0, 1.0, 1.0)
    assert out.normalized


def test_convert_quarter_box():
    out = box_to_xyxy(BoxCXCYWH(0.25, 0.25, 0.5, 0.5))
    assert (out.x_min, out.y_min, out.x_max, out.y_max) == (0.0, 0.0, 0.5, 0.5)


def test_convert_round_trip_1000_random():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        w, h = rng.uniform(0.05, 0.5, 2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = BoxCXCYWH(cx, cy, w, h)
        back = box_to_cxcywh(box_to_xyxy(box))
        for a, b in zip((box.cx, box.cy, box.w, box.h), (back.cx, back.cy, back.w, back.h)):
            assert abs(a - b) < 1e-12


def test_degenerate_box_rejected():
    with pytest.raises(BoxError):
        BoxCXCYWH(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(BoxError):
        BoxCXCYWH(0.5, 0.5, 0.1, -0.2)
    with pytest.raises(BoxError):
        BoxXYXY(1.0, 0.0, 1.0, 2.0)


def test_iou_identical_and_disjoint():
    a = BoxXYXY(0.0, 0.0, 2.0, 2.0)
    assert iou(a, a) == 1.0
    assert iou(a, BoxXYXY(5.0, 5.0, 6.0, 6.0)) == 0.0


def test_iou_hand_fixture():
    a = BoxXYXY(0.0, 0.0, 2.0, 2.0)
    b = BoxXYXY(1.0, 1.0, 3.0, 3.0)
    assert abs(iou(a, b) - 1.0 / 7.0) < 1e-12


def test_mixed_coordinate_systems_rejected():
    a = BoxXYXY(0.0, 0.0, 1.0, 1.0, normalized=True)
    b = BoxXYXY(0.0, 0.0, 64.0, 64.0, normalized=False)
    with pytest.raises(BoxError):
        iou(a, b)
    with pytest.raises(BoxError):
        giou(a, b)


def test_giou_identical():
    a = BoxXYXY(0.2, 0.3, 0.5, 0.9, normalized=True)
    assert giou(a, a) == 1.0


def test_giou_hand_fixture():
    a = BoxXYXY(0.0, 0.0, 2.0, 2.0)
    b = BoxXYXY(1.0, 1.0, 3.0, 3.0)
    assert abs(giou(a, b) - (1.0 / 7.0 - 2.0 / 9.0)) < 1e-9


def test_giou_decreases_with_separation():
    a = BoxXYXY(0.0, 0.0, 1.0, 1.0)
    values = [giou(a, BoxXYXY(d, 0.0, d + 1.0, 1.0)) for d in (2.0, 10.0, 100.0)]
    assert values[0] > values[1] > values[2]
    assert values[2] > -1.0


def test_l1_distance():
    a = BoxCXCYWH(0.5, 0.5, 0.2, 0.2)
    assert l1_distance(a, a) == 0.0
    b = BoxCXCYWH(0.4, 0.5, 0.2, 0.3)
    assert abs(l1_distance(a, b) - 0.2) < 1e-15


def test_l1_symmetric_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = BoxCXCYWH(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.3, 2))
        b = BoxCXCYWH(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.3, 2))
        assert l1_distance(a, b) == l1_distance(b, a)


def _random_box(rng) -> BoxXYXY:
    x0, y0 = rng.uniform(0, 0.8, 2)
    return BoxXYXY(x0, y0, x0 + rng.uniform(0.05, 0.2), y0 + rng.uniform(0.05, 0.2),
                   normalized=True)


def test_giou_never_exceeds_iou():
    rng = np.random.default_rng(1)
    for _ in range(5000):
        a, b = _random_box(rng), _random_box(rng)
        assert giou(a, b) <= iou(a, b) + 1e-12


def test_iou_giou_symmetric_and_invariant():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a, b = _random_box(rng), _random_box(rng)
        assert abs(iou(a, b) - iou(b, a)) < 1e-12
        assert abs(giou(a, b) - giou(b, a)) < 1e-12
        # simultaneous translation
        dx, dy = rng.uniform(-0.5, 0.5, 2)
        at = BoxXYXY(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy, normalized=True)
        bt = BoxXYXY(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy, normalized=True)
        assert abs(giou(at, bt) - giou(a, b)) < 1e-9
        # simultaneous positive scaling
        s = rng.uniform(0.5, 3.0)
        a2 = BoxXYXY(a.x_min * s, a.y_min * s, a.x_max * s, a.y_max * s, normalized=True)
        b2 = BoxXYXY(b.x_min * s, b.y_min * s, b.x_max * s, b.y_max * s, normalized=True)
        assert abs(giou(a2, b2) - giou(a, b)) < 1e-9


def test_pixel_scaling_round_trip():
    box = BoxXYXY(0.125, 0.25, 0.5, 0.75, normalized=True)
    pixels = scale_to_pixels(box, 64, 64)
    assert (pixels.x_min, pixels.y_min, pixels.x_max, pixels.y_max) == (8.0, 16.0, 32.0, 48.0)
    back = normalize_box(pixels, 64, 64)
    assert back == box
    with pytest.raises(BoxError):
        scale_to_pixels(pixels, 64, 64)
