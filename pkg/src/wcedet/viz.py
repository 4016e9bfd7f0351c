"""Box overlays and gradient-weighted activation maps.

Overlays paint rectangle borders onto a copy of the frame (bleed regions
red, non-bleed green when enabled); nothing outside the declared borders
changes unless score labels are switched on, which additionally stamps a
small digit strip just inside the top-left corner of each box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import box_to_xyxy, scale_to_pixels
from .model import BLEED, CATEGORIES, Detector, FrameDecision
from .tensor import zero_grads


@dataclass(frozen=True)
class OverlayStyle:
    bleed_color: tuple[float, float, float] = (1.0, 0.0, 0.0)
    non_bleed_color: tuple[float, float, float] = (0.0, 1.0, 0.0)
    thickness: int = 1
    score_labels: bool = False
    show_non_bleed: bool = False

    def __post_init__(self):
        if self.thickness < 1:
            raise ValueError(f"thickness must be >= 1, got {self.thickness}")


# 3x5 bitmap digits for the optional score labels
_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
}


def _paint(image: np.ndarray, r0: int, r1: int, c0: int, c1: int, color: np.ndarray):
    h, w = image.shape[1:]
    r0, r1 = max(r0, 0), min(r1, h)
    c0, c1 = max(c0, 0), min(c1, w)
    if r0 < r1 and c0 < c1:
        image[:, r0:r1, c0:c1] = color[:, None, None]


def _draw_text(image: np.ndarray, text: str, top: int, left: int, color: np.ndarray):
    x = left
    for ch in text:
        glyph = _FONT.get(ch)
        if glyph is None:
            continue
        for dy, row in enumerate(glyph):
            for dx, bit in enumerate(row):
                if bit == "1":
                    _paint(image, top + dy, top + dy + 1, x + dx, x + dx + 1, color)
        x += 4


def render_overlay(image: np.ndarray, decision: FrameDecision,
                   style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Return a copy of the frame with region borders superimposed."""
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = out.shape[1:]
    t = style.thickness
    for region in decision.regions:
        if region.category != CATEGORIES[BLEED] and not style.show_non_bleed:
            continue
        color = np.asarray(style.bleed_color if region.category == CATEGORIES[BLEED]
                           else style.non_bleed_color)
        box = scale_to_pixels(box_to_xyxy(region.box), w, h)
        x0, y0 = int(round(box.x_min)), int(round(box.y_min))
        x1, y1 = int(round(box.x_max)), int(round(box.y_max))
        _paint(out, y0, min(y0 + t, y1), x0, x1, color)          # top
        _paint(out, max(y1 - t, y0), y1, x0, x1, color)          # bottom
        _paint(out, y0, y1, x0, min(x0 + t, x1), color)          # left
        _paint(out, y0, y1, max(x1 - t, x0), x1, color)          # right
        if style.score_labels:
            _draw_text(out, f"{region.probability:.2f}", y0 + t + 1, x0 + t + 1, color)
    return out


def activation_map(model: Detector, image, target_category: int = BLEED,
                   stage: int = -1) -> np.ndarray:
    """Gradient-weighted activation map over a backbone stage, in [0, 1].

    The target score is the maximum over queries of the chosen category's
    logit; channel weights are the spatially averaged gradients at the
    stage map. The map is relu'd, min-max normalized (an all-zero map stays
    zero), and nearest-neighbor upsampled to the input resolution.

    Clears parameter gradients on exit, so do not interleave with an
    in-flight training step.
    """
    preds, maps = model.forward_with_features(image)
    feat = maps[stage]
    q_star = int(np.argmax(preds.logits.data[:, target_category]))
    score = T.reshape(T.slice_cols(T.gather_rows(preds.logits, [q_star]),
                                   target_category, target_category + 1), ())
    T.backward(score)
    grad = feat.grad
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * feat.data).sum(axis=0), 0.0)
    zero_grads(model.parameters())

    span = cam.max() - cam.min()
    cam = (cam - cam.min()) / span if span > 0 else np.zeros_like(cam)
    size = model.cfg.input_size
    fy, fx = size // cam.shape[0], size // cam.shape[1]
    return np.repeat(np.repeat(cam, fy, axis=0), fx, axis=1)


def heatmap_to_image(cam: np.ndarray) -> np.ndarray:
    """Grayscale (3, H, W) rendering of a [0, 1] heatmap."""
    return np.stack([cam, cam, cam])
