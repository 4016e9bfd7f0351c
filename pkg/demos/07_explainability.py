"""Overlays and activation maps from the tiny checkpoint.

Run 05_train_tiny_detector.py first; this script loads its checkpoint,
draws detection overlays, and writes gradient-based activation heatmaps.
"""

import os
import sys

import numpy as np

from wcedet.data import (SyntheticSceneSpec, build_synthetic_dataset, normalize_image,
                         save_ppm)
from wcedet.model import classify_frame
from wcedet.train import TrainConfig, checkpoint_load
from wcedet.viz import OverlayStyle, activation_map, heatmap_to_image, render_overlay

OUT = os.path.join(os.path.dirname(__file__), "out")
CKPT = os.path.join(OUT, "tiny_detector.ckpt")
if not os.path.exists(CKPT):
    sys.exit("run 05_train_tiny_detector.py first to produce the checkpoint")

model, _ = checkpoint_load(CKPT)
cfg = TrainConfig()
spec = SyntheticSceneSpec(image_size=16, bleed_count=(1, 1), bleed_radius=(3, 6),
                          distractor_count=(0, 1), distractor_radius=(2, 4))
scenes = build_synthetic_dataset(4, spec, seed=99)

style = OverlayStyle(thickness=1, show_non_bleed=True)
for image, record in scenes:
    x = normalize_image(image, cfg.augmentation)
    decision = classify_frame(model.forward(x))
    overlay = render_overlay(image, decision, style)
    cam = activation_map(model, x)

    save_ppm(overlay, os.path.join(OUT, f"{record.image_id}_overlay.ppm"))
    save_ppm(heatmap_to_image(cam), os.path.join(OUT, f"{record.image_id}_cam.ppm"))

    inside = [cam[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)].mean()
              for c, b in record.regions if c == 0]
    print(f"{record.image_id}: truth={record.frame_label:13s} "
          f"predicted={decision.frame_label:13s} regions={len(decision.regions)}"
          + (f" cam-inside-box={inside[0]:.3f} vs overall={cam.mean():.3f}" if inside else ""))

print(f"\noverlays and heatmaps written to {OUT}")
