"""Training loop: AdamW with decoupled weight decay and per-group learning
rates (backbone / transformer / head), plus checkpointing and evaluation.

The loop is single-threaded and seeded end to end, so two runs with the
same config produce bit-identical loss traces and checkpoints.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, augment, normalize_image
from .geometry import box_to_xyxy, scale_to_pixels
from .matching import LossWeights, criterion, reset_clamp_log, targets_from_regions
from .metrics import ImageDetections, MetricsReport, aggregate_report
from .model import CATEGORIES, Detector, ModelConfig, classify_frame


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr_backbone: float = 1e-6
    lr_transformer: float = 1e-5
    lr_head: float = 5e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if min(self.lr_backbone, self.lr_transformer, self.lr_head) <= 0:
            raise ValueError("all learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def lr_for(self, group: str) -> float:
        return {"backbone": self.lr_backbone,
                "transformer": self.lr_transformer,
                "head": self.lr_head}[group]


class AdamW:
    """Decoupled weight decay: the shrink term bypasses the adaptive scaling.

    Parameter values and both moments live in flat fused buffers (the
    per-parameter arrays are views into them), so one step is a handful of
    vectorized operations instead of a loop over ~90 small tensors.
    """

    def __init__(self, params, cfg: TrainConfig, state: dict | None = None):
        self.params = list(params)
        self.cfg = cfg
        sizes = [p.size for p in self.params]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        total = int(offsets[-1])
        self._theta = np.empty(total)
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._grad = np.empty(total)
        self._lr = np.empty(total)
        self._slices = []
        self.m = {}
        self.v = {}
        for p, lo, hi in zip(self.params, offsets[:-1], offsets[1:]):
            self._theta[lo:hi] = p.data.reshape(-1)
            p.data = self._theta[lo:hi].reshape(p.shape)  # rebind as view
            self._lr[lo:hi] = cfg.lr_for(p.group)
            self._slices.append((p, lo, hi))
            self.m[p.name] = self._m[lo:hi].reshape(p.shape)
            self.v[p.name] = self._v[lo:hi].reshape(p.shape)
        self.step_count = 0
        if state is not None:
            self.step_count = state["step"]
            for p, lo, hi in self._slices:
                moment = state["m"][p.name]
                if moment.shape != p.shape:
                    raise CheckpointError(f"moment shape mismatch for {p.name}")
                self._m[lo:hi] = moment.reshape(-1)
                self._v[lo:hi] = state["v"][p.name].reshape(-1)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def step(self):
        b1, b2 = self.cfg.betas
        for p, lo, hi in self._slices:
            if p.grad is None:
                raise TrainingError(f"missing gradient for parameter {p.name}")
            self._grad[lo:hi] = p.grad.reshape(-1)
        self.step_count += 1
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        g = self._grad
        self._m *= b1
        self._m += (1 - b1) * g
        self._v *= b2
        self._v += (1 - b2) * g * g
        update = self._lr * (self._m / bias1) / (np.sqrt(self._v / bias2) + self.cfg.eps)
        self._theta -= update + (self._lr * self.cfg.weight_decay) * self._theta

    def zero_grad(self):
        T.zero_grads(self.params)


@dataclass(frozen=True)
class EpochStats:
    loss: float
    ce: float
    l1: float
    giou: float

    def log_lines(self, epoch: int) -> list[str]:
        return [
            f"epoch={epoch}",
            f"loss={self.loss:.10g}",
            f"loss_ce={self.ce:.10g}",
            f"loss_l1={self.l1:.10g}",
            f"loss_giou={self.giou:.10g}",
        ]


def train_epoch(model: Detector, optimizer: AdamW, data, cfg: TrainConfig,
                rng: np.random.Generator) -> EpochStats:
    """One seeded, shuffled pass: augment, forward, match, backward, step."""
    if not data:
        raise TrainingError("empty training set")
    reset_clamp_log()
    order = rng.permutation(len(data))
    totals = np.zeros(4)
    pending = 0
    for idx in order:
        image, record = data[idx]
        x, _ = augment(image, record.regions, cfg.augmentation, rng)
        preds = model.forward(x)
        if not (np.isfinite(preds.logits.data).all() and np.isfinite(preds.boxes.data).all()):
            raise TrainingError(f"non-finite predictions on image {record.image_id!r}")
        targets = targets_from_regions(record.regions, *record.image_size)
        loss, _assignment = criterion(preds, targets, cfg.loss_weights)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss on image {record.image_id!r}")
        T.backward(loss)
        # zero-target images leave the box branch out of the graph; its true
        # gradient is zero, which the optimizer contract wants materialized
        for p in optimizer.params:
            if p.grad is None:
                p.grad = np.zeros(p.shape)
        pending += 1
        if pending == cfg.batch_size:
            optimizer.step()
            optimizer.zero_grad()
            pending = 0
        comp = loss.components
        totals += (value, comp["ce"], comp["l1"], comp["giou"])
    if pending:
        optimizer.step()
        optimizer.zero_grad()
    means = totals / len(data)
    return EpochStats(*means)


def train(model: Detector, data, cfg: TrainConfig, log_path: str | None = None,
          optimizer: AdamW | None = None) -> list[EpochStats]:
    """Run cfg.epochs epochs; optionally stream the metrics log to a file."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = optimizer or AdamW(model.parameters(), cfg)
    history: list[EpochStats] = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            stats = train_epoch(model, optimizer, data, cfg, rng)
            history.append(stats)
            if log:
                log.write("\n".join(stats.log_lines(epoch)) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    return history


def evaluate(model: Detector, data, cfg: TrainConfig, threshold: float = 0.5) -> MetricsReport:
    """Metrics over a dataset: no parameter updates, normalization-only input."""
    if not data:
        raise TrainingError("empty evaluation set")
    frame_preds, frame_gts, results = [], [], []
    for image, record in data:
        x = normalize_image(image, cfg.augmentation)
        decision = classify_frame(model.forward(x), threshold)
        frame_preds.append(decision.frame_label)
        frame_gts.append(record.frame_label)
        w, h = record.image_size
        dets = [(CATEGORIES.index(r.category), r.probability,
                 scale_to_pixels(box_to_xyxy(r.box), w, h)) for r in decision.regions]
        results.append(ImageDetections(record.image_id, dets, list(record.regions)))
    return aggregate_report(frame_preds, frame_gts, results)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"WCEDETCK"
_VERSION = 1


def _write_bytes(out: io.BytesIO, payload: bytes):
    out.write(struct.pack("<I", len(payload)))
    out.write(payload)


def checkpoint_save(model: Detector, optimizer: AdamW | None, path: str):
    """Binary checkpoint: magic, version, config, named float64 parameter
    table, optional optimizer moments, trailing CRC32."""
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", _VERSION))
    _write_bytes(out, json.dumps(dataclasses.asdict(model.cfg), sort_keys=True).encode())

    params = model.parameters()
    out.write(struct.pack("<I", len(params)))
    for p in params:
        _write_bytes(out, p.name.encode())
        _write_bytes(out, p.group.encode())
        out.write(struct.pack("<B", p.data.ndim))
        for dim in p.shape:
            out.write(struct.pack("<I", dim))
        out.write(p.data.astype("<f8").tobytes())

    if optimizer is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<B", 1))
        out.write(struct.pack("<Q", optimizer.step_count))
        for p in params:
            out.write(optimizer.m[p.name].astype("<f8").tobytes())
            out.write(optimizer.v[p.name].astype("<f8").tobytes())

    body = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def checkpoint_load(path: str, config: ModelConfig | None = None):
    """Rebuild (model, optimizer_state_or_None) from a checkpoint file.

    If `config` is given, it must equal the stored one; pass None to accept
    whatever the file carries.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch, checkpoint is corrupt")

    r = _Reader(body)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError("bad magic bytes")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    cfg_dict = json.loads(r.blob().decode())
    cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
    stored = ModelConfig(**cfg_dict)
    if config is not None and stored != config:
        raise CheckpointError(f"config mismatch: checkpoint has {stored}, expected {config}")

    model = Detector(stored)
    by_name = {p.name: p for p in model.parameters()}
    count = r.u32()
    if count != len(by_name):
        raise CheckpointError(f"parameter count mismatch: {count} stored, {len(by_name)} expected")
    order = []
    for _ in range(count):
        name = r.blob().decode()
        group = r.blob().decode()
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        values = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))),
                               dtype="<f8").reshape(shape)
        if name not in by_name:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        p = by_name[name]
        if p.shape != shape or p.group != group:
            raise CheckpointError(f"parameter {name!r} shape/group mismatch")
        p.data = values.copy()
        order.append(p)

    state = None
    if r.u8():
        step = r.u64()
        m, v = {}, {}
        for p in order:
            n_bytes = 8 * p.size
            m[p.name] = np.frombuffer(r.take(n_bytes), dtype="<f8").reshape(p.shape).copy()
            v[p.name] = np.frombuffer(r.take(n_bytes), dtype="<f8").reshape(p.shape).copy()
        state = {"step": step, "m": m, "v": v}
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model, state
