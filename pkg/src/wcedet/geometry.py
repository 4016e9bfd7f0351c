"""Bounding-box types, conversions, and overlap measures (IoU / generalized IoU).

Two representations: center format (cx, cy, w, h), always normalized to the
unit square, used by the model head; corner format (x_min, y_min, x_max,
y_max), either normalized or absolute pixels, used by annotations and
metrics. Corner boxes carry a `normalized` flag and refuse to mix systems.
"""

from __future__ import annotations

from dataclasses import dataclass


class BoxError(ValueError):
    """Degenerate box or mixed coordinate systems."""


@dataclass(frozen=True)
class BoxCXCYWH:
    """Center-format box, coordinates as fractions of image width/height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise BoxError(f"degenerate box: w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise BoxError(f"center ({self.cx}, {self.cy}) outside the unit square")


@dataclass(frozen=True)
class BoxXYXY:
    """Corner-format box; `normalized` tells unit-square from pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    normalized: bool = False

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise BoxError(
                f"degenerate box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def box_to_xyxy(box: BoxCXCYWH) -> BoxXYXY:
    half_w, half_h = box.w / 2.0, box.h / 2.0
    return BoxXYXY(box.cx - half_w, box.cy - half_h, box.cx + half_w, box.cy + half_h,
                   normalized=True)


def box_to_cxcywh(box: BoxXYXY) -> BoxCXCYWH:
    if not box.normalized:
        raise BoxError("box_to_cxcywh expects a normalized corner box; scale it first")
    return BoxCXCYWH((box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0,
                     box.x_max - box.x_min, box.y_max - box.y_min)


def scale_to_pixels(box: BoxXYXY, width: int, height: int) -> BoxXYXY:
    if not box.normalized:
        raise BoxError("box already in pixel coordinates")
    return BoxXYXY(box.x_min * width, box.y_min * height,
                   box.x_max * width, box.y_max * height, normalized=False)


def normalize_box(box: BoxXYXY, width: int, height: int) -> BoxXYXY:
    if box.normalized:
        raise BoxError("box already normalized")
    return BoxXYXY(box.x_min / width, box.y_min / height,
                   box.x_max / width, box.y_max / height, normalized=True)


def _check_same_system(a: BoxXYXY, b: BoxXYXY):
    if a.normalized != b.normalized:
        raise BoxError("cannot compare boxes from different coordinate systems")


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union in [0, 1]; 0 for disjoint boxes."""
    _check_same_system(a, b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Generalized IoU in (-1, 1]: IoU minus the enclosing-box penalty."""
    _check_same_system(a, b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = iw * ih if (iw > 0 and ih > 0) else 0.0
    union = a.area + b.area - inter
    enclose = ((max(a.x_max, b.x_max) - min(a.x_min, b.x_min))
               * (max(a.y_max, b.y_max) - min(a.y_min, b.y_min)))
    return inter / union - (enclose - union) / enclose


def l1_distance(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """Sum of absolute differences over (cx, cy, w, h)."""
    return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
