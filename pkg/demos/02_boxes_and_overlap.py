"""Box formats and overlap measures.

Shows the center/corner conversions and how generalized IoU keeps giving an
informative signal once plain IoU has flatlined at zero.
"""

from wcedet.geometry import BoxCXCYWH, BoxXYXY, box_to_xyxy, giou, iou, l1_distance

center_box = BoxCXCYWH(cx=0.25, cy=0.25, w=0.5, h=0.5)
corner_box = box_to_xyxy(center_box)
print(f"center {center_box} -> corners ({corner_box.x_min}, {corner_box.y_min}, "
      f"{corner_box.x_max}, {corner_box.y_max})")

a = BoxXYXY(0, 0, 2, 2)
b = BoxXYXY(1, 1, 3, 3)
print(f"\noverlapping pair: iou = {iou(a, b):.6f} (= 1/7), "
      f"giou = {giou(a, b):.6f} (= 1/7 - 2/9)")

print("\nsliding one unit box away from another:")
print(f"{'gap':>6} {'iou':>8} {'giou':>9}")
for gap in (0.0, 0.5, 1.0, 2.0, 5.0, 20.0):
    other = BoxXYXY(1 + gap, 0, 2 + gap, 1)
    base = BoxXYXY(0, 0, 1, 1)
    print(f"{gap:6.1f} {iou(base, other):8.4f} {giou(base, other):9.4f}")

near = BoxCXCYWH(0.5, 0.5, 0.2, 0.2)
far = BoxCXCYWH(0.4, 0.5, 0.2, 0.3)
print(f"\nl1 distance between center boxes: {l1_distance(near, far):.3f}")
