"""wcedet: end-to-end trainable bleeding-region detector for capsule endoscopy frames.

A desk-scale set-prediction pipeline: small residual backbone, transformer
encoder-decoder over learned object queries, 3-way category + box heads,
Hungarian-matched weighted loss, synthetic scene generator, and the full
classification/detection metric suite. Everything runs on a built-in
float64 autodiff engine; numpy is the only dependency.
"""

from .tensor import Tensor, Parameter, backward, zero_grads
from .geometry import BoxCXCYWH, BoxXYXY, box_to_xyxy, box_to_cxcywh, iou, giou, l1_distance
from .model import ModelConfig, Detector, PredictionSet, FrameDecision, classify_frame
from .matching import LossWeights, Assignment, hungarian, matching_cost, set_loss, criterion
from .data import (AnnotationRecord, AugmentationConfig, SyntheticSceneSpec, augment,
                   build_synthetic_dataset, generate_synthetic, load_dataset, load_ppm,
                   parse_voc_xml, parse_yolo_txt, save_ppm, stratified_split,
                   write_voc_xml, write_yolo_txt)
from .metrics import (MetricsReport, classification_metrics, ap_at_iou, map_coco, pr_curve,
                      recall_over_thresholds)
from .train import (TrainConfig, AdamW, train_epoch, train, evaluate, checkpoint_save,
                    checkpoint_load)
from .viz import OverlayStyle, activation_map, render_overlay

__all__ = [
    "Tensor", "Parameter", "backward", "zero_grads",
    "BoxCXCYWH", "BoxXYXY", "box_to_xyxy", "box_to_cxcywh", "iou", "giou", "l1_distance",
    "ModelConfig", "Detector", "PredictionSet", "FrameDecision", "classify_frame",
    "LossWeights", "Assignment", "hungarian", "matching_cost", "set_loss", "criterion",
    "AnnotationRecord", "AugmentationConfig", "SyntheticSceneSpec", "augment",
    "build_synthetic_dataset", "generate_synthetic", "load_dataset", "load_ppm",
    "parse_voc_xml", "parse_yolo_txt", "save_ppm", "stratified_split",
    "write_voc_xml", "write_yolo_txt",
    "MetricsReport", "classification_metrics", "ap_at_iou", "map_coco", "pr_curve",
    "recall_over_thresholds",
    "TrainConfig", "AdamW", "train_epoch", "train", "evaluate",
    "checkpoint_save", "checkpoint_load",
    "OverlayStyle", "activation_map", "render_overlay",
]

__version__ = "0.1.0"
