"""Detection metrics, step by step.

Walks a tiny precision/recall sweep by hand, then lets the library compute
AP@50, mAP over the IoU ladder, and ladder recall on the same data.
"""

from wcedet.geometry import BoxXYXY
from wcedet.metrics import (ImageDetections, ap_at_iou, classification_metrics,
                            map_coco, recall_over_thresholds)

gt1 = BoxXYXY(0, 0, 10, 10)
gt2 = BoxXYXY(30, 30, 40, 40)
stray = BoxXYXY(60, 60, 70, 70)

results = [ImageDetections(
    "frame-0",
    preds=[(0, 0.9, gt1),     # rank 1: hits the first region
           (0, 0.8, stray),   # rank 2: false positive
           (0, 0.7, gt2)],    # rank 3: hits the second region
    gts=[(0, gt1), (0, gt2)],
)]

print("rank | score | hit | cum precision | cum recall")
hits = [True, False, True]
tp = 0
for rank, (score, hit) in enumerate(zip((0.9, 0.8, 0.7), hits), start=1):
    tp += hit
    print(f"{rank:4d} | {score:.2f}  | {str(hit):5s} | {tp / rank:13.3f} | {tp / 2:10.3f}")

ap = ap_at_iou(results, 0, 0.5)
print(f"\n101-point interpolated AP@50 = {ap:.6f}")
print(f"  (the precision envelope is 1 up to recall 0.5, then 2/3: "
      f"(51*1 + 50*2/3)/101 = {(51 + 50 * 2 / 3) / 101:.6f})")

print(f"mAP over IoU 0.50:0.95       = {map_coco(results):.6f}")
print(f"recall over the same ladder  = {recall_over_thresholds(results):.6f}")

accuracy, recall, f1 = classification_metrics(
    ["bleeding", "bleeding", "non-bleeding", "non-bleeding"],
    ["bleeding", "non-bleeding", "non-bleeding", "non-bleeding"])
print(f"\nframe metrics on a toy split: accuracy={accuracy:.3f} "
      f"recall={recall:.3f} f1={f1:.3f}")
