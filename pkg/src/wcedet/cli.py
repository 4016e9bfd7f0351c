"""Command-line entry points: train, eval, infer, synth, convert, explain.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
deterministic given explicit seeds.
"""

from __future__ import annotations

import argparse
import os
import sys

from .data import (AnnotationRecord, SyntheticSceneSpec, build_synthetic_dataset,
                   frame_label_from_regions, load_dataset, load_ppm, normalize_image,
                   parse_voc_xml, parse_yolo_txt, save_ppm, write_manifest,
                   write_voc_xml, write_yolo_txt)
from .geometry import box_to_xyxy, scale_to_pixels
from .matching import LossWeights
from .metrics import (ImageDetections, aggregate_report, frame_labels_from_results,
                      read_result_files, write_detections)
from .model import CATEGORIES, Detector, ModelConfig, classify_frame
from .train import AdamW, TrainConfig, checkpoint_load, checkpoint_save, evaluate, train
from .viz import OverlayStyle, activation_map, heatmap_to_image, render_overlay


class UsageError(Exception):
    pass


_MODEL_KEYS = {"d_model": int, "n_heads": int, "enc_layers": int, "dec_layers": int,
               "n_queries": int, "input_size": int}
_TRAIN_KEYS = {"epochs": int, "lr_backbone": float, "lr_transformer": float,
               "lr_head": float, "weight_decay": float, "batch_size": int, "seed": int}
_LOSS_KEYS = {"w_class": float, "w_l1": float, "w_giou": float, "background_weight": float}


def parse_config_file(path: str) -> tuple[dict, dict, dict]:
    """Flat key=value text; unknown keys are rejected."""
    model_kv, train_kv, loss_kv = {}, {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                if key == "backbone_channels":
                    model_kv[key] = tuple(int(v) for v in value.split(","))
                elif key in _MODEL_KEYS:
                    model_kv[key] = _MODEL_KEYS[key](value)
                elif key in _TRAIN_KEYS:
                    train_kv[key] = _TRAIN_KEYS[key](value)
                elif key in _LOSS_KEYS:
                    loss_kv[key] = _LOSS_KEYS[key](value)
                else:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return model_kv, train_kv, loss_kv


def _build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_kv, train_kv, loss_kv = ({}, {}, {})
    if getattr(args, "config", None):
        model_kv, train_kv, loss_kv = parse_config_file(args.config)
    if getattr(args, "epochs", None) is not None:
        train_kv["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        train_kv["seed"] = args.seed
    if loss_kv:
        train_kv["loss_weights"] = LossWeights(**loss_kv)
    try:
        return ModelConfig(**model_kv), TrainConfig(**train_kv)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _load_images(args):
    """(image, id, record_or_None) triples from --images or --manifest."""
    out = []
    if getattr(args, "images", None):
        for path in args.images:
            image_id = os.path.splitext(os.path.basename(path))[0]
            out.append((load_ppm(path), image_id, None))
    elif getattr(args, "manifest", None):
        for image, record in load_dataset(args.manifest):
            out.append((image, record.image_id, record))
    else:
        raise UsageError("provide --images or --manifest")
    return out


# ---------------------------------------------------------------------------
# verbs


def _cmd_synth(args) -> int:
    scale = args.image_size / 64.0  # keep blob proportions across sizes
    spec = SyntheticSceneSpec(
        image_size=args.image_size, seed=args.seed,
        bleed_radius=(max(2, round(6 * scale)), max(3, round(14 * scale))),
        distractor_radius=(max(2, round(5 * scale)), max(3, round(12 * scale))))
    samples = build_synthetic_dataset(args.count, spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for image, record in samples:
        stem = record.image_id
        image_name = f"{stem}.ppm"
        save_ppm(image, os.path.join(args.out, image_name))
        record.image_path = image_name
        if args.format == "xml":
            ann_name = f"{stem}.xml"
            text = write_voc_xml(record)
        else:
            ann_name = f"{stem}.txt"
            text = write_yolo_txt(record)
        with open(os.path.join(args.out, ann_name), "w", encoding="utf-8") as fh:
            fh.write(text)
        entries.append((image_name, ann_name, args.format))
    write_manifest(entries, os.path.join(args.out, "manifest.txt"))
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    model_cfg, train_cfg = _build_configs(args)
    data = load_dataset(args.manifest)
    model = Detector(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(model.parameters(), train_cfg)
    history = train(model, data, train_cfg, log_path=args.log, optimizer=optimizer)
    checkpoint_save(model, optimizer, args.checkpoint)
    print(f"trained {train_cfg.epochs} epochs, final loss {history[-1].loss:.6f}")
    print(f"checkpoint written to {args.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    if args.detections or args.truth:
        if not (args.detections and args.truth):
            raise UsageError("--detections and --truth must be given together")
        results = read_result_files(args.detections, args.truth)
        frame_preds, frame_gts = frame_labels_from_results(results, args.threshold)
        report = aggregate_report(frame_preds, frame_gts, results)
    elif args.checkpoint and args.manifest:
        _, train_cfg = _build_configs(args)
        model, _ = checkpoint_load(args.checkpoint)
        data = load_dataset(args.manifest)
        report = evaluate(model, data, train_cfg, threshold=args.threshold)
    else:
        raise UsageError("provide either --checkpoint and --manifest, "
                         "or --detections and --truth")
    text = "\n".join(report.as_lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def _cmd_infer(args) -> int:
    _, train_cfg = _build_configs(args)
    model, _ = checkpoint_load(args.checkpoint)
    style = OverlayStyle(show_non_bleed=args.show_non_bleed)
    results = []
    for image, image_id, _record in _load_images(args):
        x = normalize_image(image, train_cfg.augmentation)
        decision = classify_frame(model.forward(x), args.threshold)
        print(f"{image_id}\t{decision.frame_label}\t{len(decision.regions)} regions")
        h, w = image.shape[1:]
        dets = [(CATEGORIES.index(r.category), r.probability,
                 scale_to_pixels(box_to_xyxy(r.box), w, h)) for r in decision.regions]
        results.append(ImageDetections(image_id, dets, []))
        if args.overlay_dir:
            os.makedirs(args.overlay_dir, exist_ok=True)
            overlay = render_overlay(image, decision, style)
            save_ppm(overlay, os.path.join(args.overlay_dir, f"{image_id}_overlay.ppm"))
    if args.out:
        write_detections(results, args.out)
    return 0


def _cmd_convert(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        text = fh.read()
    src = "xml" if args.input.endswith(".xml") else "yolo"
    if src == "xml":
        record = parse_voc_xml(text)
    else:
        if not args.image_size:
            raise UsageError("YOLO input needs --image-size W H")
        width, height = args.image_size
        regions = parse_yolo_txt(text, (width, height))
        stem = os.path.splitext(os.path.basename(args.input))[0]
        record = AnnotationRecord(image_id=stem, image_path=f"{stem}.ppm",
                                  frame_label=frame_label_from_regions(regions),
                                  regions=regions, image_size=(width, height))
    out_text = write_voc_xml(record) if args.to == "xml" else write_yolo_txt(record)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(out_text)
    return 0


def _cmd_explain(args) -> int:
    _, train_cfg = _build_configs(args)
    model, _ = checkpoint_load(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    for image, image_id, _record in _load_images(args):
        x = normalize_image(image, train_cfg.augmentation)
        cam = activation_map(model, x, stage=args.stage)
        save_ppm(heatmap_to_image(cam), os.path.join(args.out_dir, f"{image_id}_cam.ppm"))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wcedet",
        description="Train, evaluate, and inspect the capsule-endoscopy bleeding detector.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--format", choices=("yolo", "xml"), default="yolo")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit the detector on a manifest dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", default=None, help="per-epoch metrics log (key=value lines)")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="report the six metrics on a dataset or result files")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--detections", help="results file: image_id category score x0 y0 x1 y1")
    p.add_argument("--truth", help="ground-truth file: image_id category x0 y0 x1 y1")
    p.add_argument("--config", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="classify frames and write detections/overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.add_argument("--overlay-dir", default=None)
    p.add_argument("--show-non-bleed", action="store_true")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("convert", help="convert annotations between VOC XML and YOLO txt")
    p.add_argument("--input", required=True)
    p.add_argument("--to", choices=("xml", "yolo"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("explain", help="write activation-map heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+")
    p.add_argument("--manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--stage", type=int, default=-1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
