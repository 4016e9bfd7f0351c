"""Frame-classification metrics (accuracy / recall / F1) and detection metrics
(AP@50, mAP over the 0.50:0.95 IoU ladder, recall over the same ladder).

AP follows the COCO conventions: detections globally sorted by score,
greedy best-IoU matching against unmatched same-category ground truth, and
101-point interpolation of the precision envelope. Ties are broken
deterministically (higher score, earlier image, earlier input order), so
every number here is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoxXYXY, iou
from .model import BLEED, BLEEDING, CATEGORIES, NON_BLEED, NON_BLEEDING

IOU_LADDER = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


class MetricsError(ValueError):
    pass


@dataclass
class ImageDetections:
    """Predictions and ground truth for one image, absolute-pixel boxes."""

    image_id: str
    preds: list[tuple[int, float, BoxXYXY]]
    gts: list[tuple[int, BoxXYXY]]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """The six summary numbers: three classification, three detection."""

    accuracy: float
    recall: float
    f1: float
    ap50: float
    map: float
    recall_0p5_0p95: float

    def as_lines(self) -> list[str]:
        return [
            f"accuracy={self.accuracy:.6f}",
            f"recall={self.recall:.6f}",
            f"f1={self.f1:.6f}",
            f"ap50={self.ap50:.6f}",
            f"map={self.map:.6f}",
            f"recall_0.5_0.95={self.recall_0p5_0p95:.6f}",
        ]


# ---------------------------------------------------------------------------
# classification


def confusion_counts(frame_preds, frame_gts) -> ConfusionCounts:
    if len(frame_preds) != len(frame_gts):
        raise MetricsError(f"length mismatch: {len(frame_preds)} preds vs {len(frame_gts)} labels")
    if not frame_gts:
        raise MetricsError("no frames to evaluate")
    tp = fp = tn = fn = 0
    for pred, gt in zip(frame_preds, frame_gts):
        if gt == BLEEDING:
            if pred == BLEEDING:
                tp += 1
            else:
                fn += 1
        else:
            if pred == BLEEDING:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def classification_metrics(frame_preds, frame_gts) -> tuple[float, float, float]:
    """(accuracy, recall, f1) with bleeding as the positive class.

    Zero denominators yield 0 by convention.
    """
    c = confusion_counts(frame_preds, frame_gts)
    accuracy = (c.tp + c.tn) / c.total
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return accuracy, recall, f1


# ---------------------------------------------------------------------------
# detection


def _match_detections(results, category: int, iou_thr: float):
    """Greedy score-ordered matching; returns (tp flags in rank order, n_gt).

    Each detection claims the unmatched same-category ground-truth box with
    the highest IoU at or above the threshold (lowest index on IoU ties).
    """
    ranked = []
    for img_idx, image in enumerate(results):
        for det_idx, (cat, score, box) in enumerate(image.preds):
            if cat == category:
                ranked.append((-score, img_idx, det_idx, box))
    ranked.sort(key=lambda r: (r[0], r[1], r[2]))

    gt_boxes = {}
    n_gt = 0
    for img_idx, image in enumerate(results):
        boxes = [box for cat, box in image.gts if cat == category]
        gt_boxes[img_idx] = (boxes, [False] * len(boxes))
        n_gt += len(boxes)

    tp = np.zeros(len(ranked), dtype=bool)
    for rank, (_, img_idx, _, box) in enumerate(ranked):
        boxes, used = gt_boxes[img_idx]
        best, best_iou = -1, -1.0
        for gi, gt_box in enumerate(boxes):
            if used[gi]:
                continue
            value = iou(box, gt_box)
            if value >= iou_thr and value > best_iou:  # ties keep the lowest index
                best, best_iou = gi, value
        if best >= 0:
            used[best] = True
            tp[rank] = True
    return tp, n_gt


def pr_curve(results, category: int, iou_thr: float):
    """Score-sorted cumulative (precision, recall) points for one category.

    Recall is non-decreasing along the sweep. Returns two equal-length
    arrays (empty when there are no detections of the category).
    """
    if not (0.0 < iou_thr < 1.0):
        raise MetricsError(f"iou threshold must lie in (0, 1), got {iou_thr}")
    tp, n_gt = _match_detections(results, category, iou_thr)
    if n_gt == 0 or len(tp) == 0:
        return np.zeros(0), np.zeros(0)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    return precision, recall


def ap_at_iou(results, category: int, iou_thr: float) -> float:
    """Average precision for one category at one IoU threshold.

    101-point interpolation: the precision envelope is sampled on the
    recall grid 0.00, 0.01, ..., 1.00 and averaged. Zero ground truth for
    the category gives 0 by convention.
    """
    precision, recall = pr_curve(results, category, iou_thr)
    if len(precision) == 0:
        return 0.0
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 101)


def map_coco(results) -> float:
    """Mean AP over the IoU ladder and the categories present in ground truth."""
    categories = _present_categories(results)
    if not categories:
        return 0.0
    per_cat = [np.mean([ap_at_iou(results, c, t) for t in IOU_LADDER]) for c in categories]
    return float(np.mean(per_cat))


def recall_over_thresholds(results) -> float:
    """Matched ground-truth fraction averaged over the IoU ladder and categories."""
    categories = _present_categories(results)
    if not categories:
        return 0.0
    per_cat = []
    for c in categories:
        fractions = []
        for t in IOU_LADDER:
            tp, n_gt = _match_detections(results, c, t)
            fractions.append(tp.sum() / n_gt if n_gt else 0.0)
        per_cat.append(np.mean(fractions))
    return float(np.mean(per_cat))


def _present_categories(results) -> list[int]:
    present = {cat for image in results for cat, _ in image.gts}
    return sorted(present)


def aggregate_report(frame_preds, frame_gts, results) -> MetricsReport:
    """Assemble the six-number report; ap50 is the bleed-category AP@0.5."""
    accuracy, recall, f1 = classification_metrics(frame_preds, frame_gts)
    return MetricsReport(
        accuracy=accuracy, recall=recall, f1=f1,
        ap50=ap_at_iou(results, BLEED, 0.5),
        map=map_coco(results),
        recall_0p5_0p95=recall_over_thresholds(results),
    )


# ---------------------------------------------------------------------------
# results / ground-truth files


_CATEGORY_IDS = {CATEGORIES[BLEED]: BLEED, CATEGORIES[NON_BLEED]: NON_BLEED}


def write_detections(results, path: str):
    """One line per detection: image_id category score x_min y_min x_max y_max."""
    with open(path, "w", encoding="utf-8") as fh:
        for image in results:
            for cat, score, box in image.preds:
                fh.write(f"{image.image_id} {CATEGORIES[cat]} {score:.6f} "
                         f"{box.x_min:.2f} {box.y_min:.2f} {box.x_max:.2f} {box.y_max:.2f}\n")


def write_ground_truth(results, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for image in results:
            for cat, box in image.gts:
                fh.write(f"{image.image_id} {CATEGORIES[cat]} "
                         f"{box.x_min:.2f} {box.y_min:.2f} {box.x_max:.2f} {box.y_max:.2f}\n")


def _parse_category(token: str, where: str) -> int:
    if token not in _CATEGORY_IDS:
        raise MetricsError(f"{where}: unknown category {token!r}")
    return _CATEGORY_IDS[token]


def read_result_files(detections_path: str, truth_path: str) -> list[ImageDetections]:
    """Build per-image results from a detections file and a ground-truth file.

    Images are ordered by sorted image id (the id set is the union of both
    files), which fixes the tie-break order.
    """
    preds: dict[str, list] = {}
    gts: dict[str, list] = {}
    with open(detections_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise MetricsError(f"{detections_path}:{lineno}: expected 7 fields")
            cat = _parse_category(parts[1], f"{detections_path}:{lineno}")
            score = float(parts[2])
            if not (0.0 < score <= 1.0):
                raise MetricsError(f"{detections_path}:{lineno}: score {score} outside (0, 1]")
            box = BoxXYXY(*(float(p) for p in parts[3:]))
            preds.setdefault(parts[0], []).append((cat, score, box))
    with open(truth_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise MetricsError(f"{truth_path}:{lineno}: expected 6 fields")
            cat = _parse_category(parts[1], f"{truth_path}:{lineno}")
            box = BoxXYXY(*(float(p) for p in parts[2:]))
            gts.setdefault(parts[0], []).append((cat, box))

    ids = sorted(set(preds) | set(gts))
    return [ImageDetections(i, preds.get(i, []), gts.get(i, [])) for i in ids]


def frame_labels_from_results(results, threshold: float = 0.5):
    """Frame labels implied by region data: bleeding iff a bleed region exists
    (ground truth) or a bleed detection clears the probability threshold."""
    frame_preds, frame_gts = [], []
    for image in results:
        has_pred = any(cat == BLEED and score > threshold for cat, score, _ in image.preds)
        has_gt = any(cat == BLEED for cat, _ in image.gts)
        frame_preds.append(BLEEDING if has_pred else NON_BLEEDING)
        frame_gts.append(BLEEDING if has_gt else NON_BLEEDING)
    return frame_preds, frame_gts
