"""Annotation parsing (Pascal-VOC XML and YOLO txt), stratified splitting,
photometric augmentation, the synthetic scene generator, and PPM image I/O.

Parsers reject out-of-contract input instead of repairing it. Images are
(3, H, W) float64 arrays in [0, 1]; region boxes are absolute-pixel corner
boxes with an exclusive high edge. Categories are indexed bleed=0,
non-bleed=1 (the YOLO class ids).
"""

from __future__ import annotations

import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace

import numpy as np

from .geometry import BoxError, BoxXYXY
from .model import BLEED, BLEEDING, NON_BLEED, NON_BLEEDING

Region = tuple[int, BoxXYXY]


class AnnotationError(ValueError):
    """Malformed or out-of-contract annotation input."""


class ImageFormatError(ValueError):
    """Broken PPM stream."""


_NAME_TO_CATEGORY = {
    "bleeding": BLEED, "bleed": BLEED,
    "nonbleeding": NON_BLEED, "nonbleed": NON_BLEED,
}


def category_from_name(name: str) -> int:
    key = name.strip().lower().replace("-", "").replace("_", "")
    if key not in _NAME_TO_CATEGORY:
        raise AnnotationError(f"unknown category name {name!r}")
    return _NAME_TO_CATEGORY[key]


@dataclass
class AnnotationRecord:
    image_id: str
    image_path: str
    frame_label: str
    regions: list[Region]
    image_size: tuple[int, int]  # (W, H)


def frame_label_from_regions(regions) -> str:
    return BLEEDING if any(c == BLEED for c, _ in regions) else NON_BLEEDING


def _check_box_in_bounds(box: BoxXYXY, width: int, height: int):
    if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
        raise AnnotationError(
            f"box ({box.x_min}, {box.y_min}, {box.x_max}, {box.y_max}) "
            f"outside the {width}x{height} image")


# ---------------------------------------------------------------------------
# Pascal-VOC XML


def parse_voc_xml(text: str) -> AnnotationRecord:
    """Parse the VOC subset: size plus object/name/bndbox(xmin..ymax) elements."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from exc

    size = root.find("size")
    if size is None or size.find("width") is None or size.find("height") is None:
        raise AnnotationError("missing size/width/height")
    width = int(float(size.find("width").text))
    height = int(float(size.find("height").text))
    if width <= 0 or height <= 0:
        raise AnnotationError(f"bad image size {width}x{height}")

    filename = root.findtext("filename", default="")
    regions: list[Region] = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        if name is None:
            raise AnnotationError("object without a name element")
        category = category_from_name(name)
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise AnnotationError(f"object {name!r} without a bndbox")
        try:
            coords = [float(bndbox.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"bad bndbox under object {name!r}") from exc
        try:
            box = BoxXYXY(*coords)
        except BoxError as exc:
            raise AnnotationError(str(exc)) from exc
        _check_box_in_bounds(box, width, height)
        regions.append((category, box))

    image_id = os.path.splitext(filename)[0] if filename else ""
    return AnnotationRecord(image_id=image_id, image_path=filename,
                            frame_label=frame_label_from_regions(regions), regions=regions,
                            image_size=(width, height))


_VOC_NAMES = {BLEED: "bleeding", NON_BLEED: "non-bleeding"}


def write_voc_xml(record: AnnotationRecord) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = record.image_path or f"{record.image_id}.ppm"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.image_size[0])
    ET.SubElement(size, "height").text = str(record.image_size[1])
    ET.SubElement(size, "depth").text = "3"
    for category, box in record.regions:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = _VOC_NAMES[category]
        bb = ET.SubElement(obj, "bndbox")
        ET.SubElement(bb, "xmin").text = str(int(round(box.x_min)))
        ET.SubElement(bb, "ymin").text = str(int(round(box.y_min)))
        ET.SubElement(bb, "xmax").text = str(int(round(box.x_max)))
        ET.SubElement(bb, "ymax").text = str(int(round(box.y_max)))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# ---------------------------------------------------------------------------
# YOLO txt


def parse_yolo_txt(text: str, image_size: tuple[int, int]) -> list[Region]:
    """Lines of "class_id cx cy w h", normalized; returns absolute-pixel regions."""
    width, height = image_size
    regions: list[Region] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from exc
        if cls not in (BLEED, NON_BLEED):
            raise AnnotationError(f"line {lineno}: unknown class id {cls}")
        if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
            raise AnnotationError(f"line {lineno}: coordinate outside [0, 1]")
        if w <= 0 or h <= 0:
            raise AnnotationError(f"line {lineno}: degenerate box w={w}, h={h}")
        box = BoxXYXY((cx - w / 2) * width, (cy - h / 2) * height,
                      (cx + w / 2) * width, (cy + h / 2) * height)
        eps = 1e-6 * max(width, height)
        if box.x_min < -eps or box.y_min < -eps or box.x_max > width + eps or box.y_max > height + eps:
            raise AnnotationError(f"line {lineno}: box extends outside the image")
        regions.append((cls, box))
    return regions


def write_yolo_txt(record: AnnotationRecord) -> str:
    width, height = record.image_size
    lines = []
    for category, box in record.regions:
        cx = (box.x_min + box.x_max) / 2.0 / width
        cy = (box.y_min + box.y_max) / 2.0 / height
        w = (box.x_max - box.x_min) / width
        h = (box.y_max - box.y_min) / height
        lines.append(f"{category} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n")
    return "".join(lines)


def one_hot(category: int, n: int = 3) -> np.ndarray:
    if not (0 <= category < n):
        raise AnnotationError(f"category index {category} out of range for {n} classes")
    vec = np.zeros(n)
    vec[category] = 1.0
    return vec


# ---------------------------------------------------------------------------
# splitting


def stratified_split(records, ratio: float = 0.8, seed: int = 0):
    """Per-label seeded shuffle, floor(ratio * count) of each label into train."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in (BLEEDING, NON_BLEEDING):
        group = [r for r in records if _label_of(r) == label]
        if not group:
            raise AnnotationError(f"no records with frame label {label!r}")
        order = rng.permutation(len(group))
        k = math.floor(ratio * len(group))
        train += [group[i] for i in order[:k]]
        val += [group[i] for i in order[k:]]
    return train, val


def _label_of(record) -> str:
    # accepts bare records or (image, record) samples
    if isinstance(record, AnnotationRecord):
        return record.frame_label
    return record[1].frame_label


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    """Photometric pipeline; geometry is untouched so boxes pass through.

    Order: motion blur, graying, brightness/contrast, per-channel color
    jitter, gamma, then channel normalization last.
    """

    blur: bool = True
    blur_prob: float = 0.15
    blur_lengths: tuple[int, int] = (3, 7)
    gray: bool = True
    gray_prob: float = 0.05
    brightness_contrast: bool = True
    brightness_contrast_prob: float = 0.3
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.85, 1.15)
    jitter: bool = True
    jitter_prob: float = 0.3
    jitter_scale: float = 0.08
    jitter_shift: float = 0.04
    gamma: bool = True
    gamma_prob: float = 0.3
    gamma_range: tuple[float, float] = (0.8, 1.3)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.blur_lengths[0] > self.blur_lengths[1] or self.blur_lengths[0] < 1:
            raise ValueError(f"bad blur length range {self.blur_lengths}")
        if self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError(f"bad contrast range {self.contrast_range}")
        if self.gamma_range[0] <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError(f"gamma range must be positive, got {self.gamma_range}")
        if min(self.std) <= 0:
            raise ValueError("normalization std must be positive")


IDENTITY_AUG = AugmentationConfig(blur=False, gray=False, brightness_contrast=False,
                                  jitter=False, gamma=False,
                                  mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))

_BLUR_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))  # h, v, diag, anti-diag


def _motion_blur(image: np.ndarray, length: int, direction: tuple[int, int]) -> np.ndarray:
    dy, dx = direction
    half = length // 2
    padded = np.pad(image, ((0, 0), (half, half), (half, half)), mode="reflect")
    h, w = image.shape[1:]
    acc = np.zeros_like(image)
    for t in range(-half, half + 1):
        oy, ox = half + t * dy, half + t * dx
        acc += padded[:, oy:oy + h, ox:ox + w]
    return acc / length


def augment(image: np.ndarray, regions, cfg: AugmentationConfig,
            rng: np.random.Generator):
    """Apply the enabled photometric transforms; regions are returned as-is."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {x.shape}")

    if cfg.blur and rng.random() < cfg.blur_prob:
        lo, hi = cfg.blur_lengths
        odd = [k for k in range(lo, hi + 1) if k % 2 == 1] or [lo | 1]
        length = int(rng.choice(odd))
        direction = _BLUR_DIRECTIONS[int(rng.integers(len(_BLUR_DIRECTIONS)))]
        x = _motion_blur(x, length, direction)

    if cfg.gray and rng.random() < cfg.gray_prob:
        lum = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
        x = np.stack([lum, lum, lum])

    if cfg.brightness_contrast and rng.random() < cfg.brightness_contrast_prob:
        delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
        factor = rng.uniform(*cfg.contrast_range)
        x = np.clip((x - 0.5) * factor + 0.5 + delta, 0.0, 1.0)

    if cfg.jitter and rng.random() < cfg.jitter_prob:
        scale = rng.uniform(1 - cfg.jitter_scale, 1 + cfg.jitter_scale, size=3)
        shift = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift, size=3)
        x = np.clip(x * scale[:, None, None] + shift[:, None, None], 0.0, 1.0)

    if cfg.gamma and rng.random() < cfg.gamma_prob:
        exponent = rng.uniform(*cfg.gamma_range)
        x = np.clip(x, 0.0, 1.0) ** exponent

    x = normalize_image(x, cfg)
    return x, regions


def normalize_image(image: np.ndarray, cfg: AugmentationConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean)[:, None, None]
    std = np.asarray(cfg.std)[:, None, None]
    return (image - mean) / std


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Mucosa-like background with red bleed blobs and pale distractors."""

    image_size: int = 64
    bleed_count: tuple[int, int] = (0, 2)
    bleed_radius: tuple[int, int] = (10, 16)
    distractor_count: tuple[int, int] = (0, 2)
    distractor_radius: tuple[int, int] = (6, 11)
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.bleed_count, self.distractor_count):
            if lo < 0 or lo > hi:
                raise ValueError("blob count ranges must be 0 <= lo <= hi")
        for lo, hi in (self.bleed_radius, self.distractor_radius):
            if lo < 2 or lo > hi or 2 * hi >= self.image_size:
                raise ValueError("blob radii must fit inside the image")


ALPHA_SOLID = 0.5  # coverage threshold defining a blob's recorded box


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape[1:]
    ys = np.linspace(0.0, gh - 1.0, size)
    xs = np.linspace(0.0, gw - 1.0, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    return ((grid[:, y0][:, :, x0] * (1 - wy) * (1 - wx))
            + (grid[:, y0][:, :, x1] * (1 - wy) * wx)
            + (grid[:, y1][:, :, x0] * wy * (1 - wx))
            + (grid[:, y1][:, :, x1] * wy * wx))


def _blob_alpha(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy = np.arange(size)[:, None]
    xx = np.arange(size)[None, :]
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - d) * 3.0, 0.0, 1.0)  # soft rim over the outer third


def _place_blobs(rng, size, count_range, radius_range, taken, forced_count=None):
    lo, hi = count_range
    count = int(rng.integers(lo, hi + 1)) if forced_count is None else forced_count
    blobs = []
    for _ in range(count):
        ry = float(rng.uniform(radius_range[0], radius_range[1]))
        rx = float(rng.uniform(radius_range[0], radius_range[1]))
        for _attempt in range(30):
            cy = float(rng.uniform(ry + 1, size - ry - 1))
            cx = float(rng.uniform(rx + 1, size - rx - 1))
            ok = all((cy - oy) ** 2 + (cx - ox) ** 2 > (0.8 * (max(ry, rx) + orad)) ** 2
                     for oy, ox, orad in taken)
            if ok:
                break
        blobs.append((cy, cx, ry, rx))
        taken.append((cy, cx, max(ry, rx)))
    return blobs


def generate_synthetic(spec: SyntheticSceneSpec, rng: np.random.Generator,
                       image_id: str = "scene", image_path: str = ""):
    """Render one scene; returns (image, record) with pixel-accurate boxes.

    A recorded box is the tight bound of the pixels where that blob's alpha
    exceeds ALPHA_SOLID (exclusive high edge), so it contains every solid
    pixel of the blob by construction.
    """
    s = spec.image_size
    base = np.array([0.75, 0.46, 0.44]) + rng.uniform(-0.04, 0.04, size=3)
    grid = rng.uniform(-1.0, 1.0, size=(3, 5, 5))
    image = base[:, None, None] + spec.texture_amplitude * _bilinear_upsample(grid, s)

    taken: list[tuple[float, float, float]] = []
    n_bleed = int(rng.integers(spec.bleed_count[0], spec.bleed_count[1] + 1))
    bleed_blobs = _place_blobs(rng, s, spec.bleed_count, spec.bleed_radius, taken,
                               forced_count=n_bleed)
    distractor_blobs = _place_blobs(rng, s, spec.distractor_count, spec.distractor_radius, taken)

    regions: list[Region] = []
    for category, blobs in ((BLEED, bleed_blobs), (NON_BLEED, distractor_blobs)):
        for cy, cx, ry, rx in blobs:
            if category == BLEED:
                color = np.array([rng.uniform(0.35, 0.55), rng.uniform(0.02, 0.10),
                                  rng.uniform(0.02, 0.12)])
            else:
                color = np.array([rng.uniform(0.80, 0.95), rng.uniform(0.72, 0.88),
                                  rng.uniform(0.45, 0.62)])
            alpha = _blob_alpha(s, cy, cx, ry, rx)
            image = image * (1 - alpha) + color[:, None, None] * alpha
            ys, xs = np.nonzero(alpha > ALPHA_SOLID)
            box = BoxXYXY(float(xs.min()), float(ys.min()),
                          float(xs.max() + 1), float(ys.max() + 1))
            regions.append((category, box))

    image = np.clip(image, 0.0, 1.0)
    record = AnnotationRecord(image_id=image_id, image_path=image_path,
                              frame_label=frame_label_from_regions(regions), regions=regions,
                              image_size=(s, s))
    return image, record


def build_synthetic_dataset(count: int, spec: SyntheticSceneSpec, seed: int = 0):
    """Generate a label-balanced list of (image, record) samples.

    Even indices are bleeding scenes (at least one bleed blob), odd indices
    are non-bleeding; each scene draws from its own child RNG stream so the
    dataset is reproducible regardless of consumption order.
    """
    streams = np.random.SeedSequence(seed).spawn(count)
    samples = []
    for i in range(count):
        rng = np.random.default_rng(streams[i])
        if i % 2 == 0:
            scene_spec = replace(spec, bleed_count=(max(1, spec.bleed_count[0]),
                                                    max(1, spec.bleed_count[1])))
        else:
            scene_spec = replace(spec, bleed_count=(0, 0))
        samples.append(generate_synthetic(scene_spec, rng, image_id=f"scene-{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# PPM (P6) raster I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of PPM header")
    return buf[start:pos], pos


def load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ImageFormatError(f"bad magic {magic!r}, expected P6")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise ImageFormatError(f"bad header token {tok!r}") from exc
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    payload = buf[pos:pos + expected]
    if len(payload) != expected:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_ppm(image: np.ndarray, path: str):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) image, got {image.shape}")
    h, w = image.shape[1:]
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# dataset manifests


def write_manifest(entries, path: str):
    """entries: (image_path, annotation_path, format) triples, tab-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, annotation_path, fmt in entries:
            fh.write(f"{image_path}\t{annotation_path}\t{fmt}\n")


def read_manifest(path: str):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise AnnotationError(f"{path}:{lineno}: expected 3 tab-separated fields")
            if parts[2] not in ("xml", "yolo", "txt"):
                raise AnnotationError(f"{path}:{lineno}: unknown format {parts[2]!r}")
            entries.append(tuple(parts))
    return entries


def load_dataset(manifest_path: str):
    """Load every (image, record) pair referenced by a manifest.

    Relative paths in the manifest resolve against the manifest's directory.
    The plain "txt" format is YOLO-style and parsed identically.
    """
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for image_path, annotation_path, fmt in read_manifest(manifest_path):
        img_full = image_path if os.path.isabs(image_path) else os.path.join(root, image_path)
        ann_full = (annotation_path if os.path.isabs(annotation_path)
                    else os.path.join(root, annotation_path))
        image = load_ppm(img_full)
        with open(ann_full, encoding="utf-8") as fh:
            text = fh.read()
        image_id = os.path.splitext(os.path.basename(image_path))[0]
        if fmt == "xml":
            record = parse_voc_xml(text)
            record.image_id = record.image_id or image_id
        else:
            h, w = image.shape[1:]
            regions = parse_yolo_txt(text, (w, h))
            record = AnnotationRecord(image_id=image_id, image_path=image_path,
                                      frame_label=frame_label_from_regions(regions),
                                      regions=regions, image_size=(w, h))
        record.image_path = image_path
        samples.append((image, record))
    return samples
