import numpy as np
import pytest

from wcedet.geometry import BoxCXCYWH
from wcedet.model import Detector, FrameDecision, ModelConfig, RegionDetection
from wcedet.viz import OverlayStyle, activation_map, heatmap_to_image, render_overlay

TINY = ModelConfig(d_model=8, n_heads=2, enc_layers=1, dec_layers=1, n_queries=4,
                   backbone_channels=(4, 4, 8), input_size=16)


def _decision(*regions):
    label = "bleeding" if any(r.category == "bleed" for r in regions) else "non-bleeding"
    return FrameDecision(label, list(regions))


def _region(cx, cy, w, h, category="bleed", p=0.9):
    return RegionDetection(category, p, BoxCXCYWH(cx, cy, w, h))


def test_overlay_no_regions_is_identity():
    image = np.random.default_rng(0).uniform(0, 1, (3, 32, 32))
    out = render_overlay(image, _decision())
    assert np.array_equal(out, image)
    assert out is not image


def test_overlay_changes_exactly_the_perimeter():
    image = np.zeros((3, 64, 64))
    # box (10, 10) .. (20, 20) in pixels: cx=cy=15/64, w=h=10/64
    region = _region(15 / 64, 15 / 64, 10 / 64, 10 / 64)
    out = render_overlay(image, _decision(region), OverlayStyle(thickness=1))
    changed = np.argwhere(np.any(out != image, axis=0))
    assert len(changed) == 2 * 10 + 2 * 8  # perimeter pixel count
    ys, xs = changed[:, 0], changed[:, 1]
    assert ys.min() == 10 and ys.max() == 19 and xs.min() == 10 and xs.max() == 19
    interior = out[:, 11:19, 11:19]
    assert np.array_equal(interior, image[:, 11:19, 11:19])
    # bleed boxes paint the red channel
    assert np.all(out[0, 10, 10:20] == 1.0)


def test_overlay_clamps_out_of_bounds():
    image = np.zeros((3, 32, 32))
    region = _region(0.02, 0.5, 0.2, 0.4)  # extends past the left edge
    out = render_overlay(image, _decision(region), OverlayStyle(thickness=2))
    assert out.shape == image.shape
    assert np.any(out != image)


def test_overlay_non_bleed_hidden_by_default():
    image = np.zeros((3, 32, 32))
    region = _region(0.5, 0.5, 0.4, 0.4, category="non-bleed")
    assert np.array_equal(render_overlay(image, _decision(region)), image)
    shown = render_overlay(image, _decision(region), OverlayStyle(show_non_bleed=True))
    assert np.any(shown != image)
    assert shown[1].max() == 1.0  # green channel


def test_overlay_score_labels_paint_extra_pixels():
    image = np.zeros((3, 64, 64))
    region = _region(0.5, 0.5, 0.5, 0.5, p=0.87)
    plain = render_overlay(image, _decision(region))
    labeled = render_overlay(image, _decision(region), OverlayStyle(score_labels=True))
    assert np.count_nonzero(labeled) > np.count_nonzero(plain)


def test_overlay_style_validation():
    with pytest.raises(ValueError):
        OverlayStyle(thickness=0)


def test_activation_map_shape_and_range():
    model = Detector(TINY, seed=0)
    image = np.random.default_rng(1).uniform(-1, 1, (3, 16, 16))
    cam = activation_map(model, image)
    assert cam.shape == (16, 16)
    assert cam.min() >= 0.0 and cam.max() <= 1.0
    # parameter gradients are cleared on exit
    assert all(p.grad is None for p in model.parameters())


def test_activation_map_zero_gradients_give_zero_map():
    model = Detector(TINY, seed=2)
    model.class_head.w.data[:] = 0.0
    model.class_head.b.data[:] = 0.0
    cam = activation_map(model, np.zeros((3, 16, 16)))
    assert np.array_equal(cam, np.zeros((16, 16)))


def test_activation_map_stage_selection():
    model = Detector(TINY, seed=3)
    image = np.random.default_rng(4).uniform(-1, 1, (3, 16, 16))
    for stage in (0, 1, 2, -1):
        cam = activation_map(model, image, stage=stage)
        assert cam.shape == (16, 16)


def test_heatmap_to_image():
    cam = np.linspace(0, 1, 16).reshape(4, 4)
    img = heatmap_to_image(cam)
    assert img.shape == (3, 4, 4)
    assert np.array_equal(img[0], cam)
