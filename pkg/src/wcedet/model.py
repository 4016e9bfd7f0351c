"""Detector: residual backbone, transformer encoder-decoder over object queries,
and the shared prediction heads emitting 3-way category logits plus boxes.

The category set is fixed: bleed, non-bleed, and a background slot for
queries bound to no region. A frame counts as bleeding when at least one
query is classified bleed with probability strictly above the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import BoxCXCYWH
from .tensor import Parameter, ShapeError, Tensor

CATEGORIES = ("bleed", "non-bleed", "background")
BLEED, NON_BLEED, BACKGROUND = 0, 1, 2

BLEEDING = "bleeding"
NON_BLEEDING = "non-bleeding"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    n_queries: int = 8
    n_categories: int = 3
    backbone_channels: tuple[int, ...] = (8, 16, 32)
    input_size: int = 64
    ffn_dim: int = 0  # 0 means 4 * d_model

    def __post_init__(self):
        if self.n_categories != 3:
            raise ValueError("the detector is a 3-way classifier: bleed / non-bleed / background")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the 2-D sinusoidal encoding")
        if self.input_size % self.reduction:
            raise ValueError(
                f"input_size {self.input_size} not divisible by the backbone reduction "
                f"{self.reduction}")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)

    @property
    def reduction(self) -> int:
        # stride-2 stem plus one stride-2 downsample between consecutive stages
        return 2 ** len(self.backbone_channels)


@dataclass
class PredictionSet:
    """Per-query category logits (n_queries, 3) and center-format boxes (n_queries, 4)."""

    logits: Tensor
    boxes: Tensor


@dataclass(frozen=True)
class RegionDetection:
    category: str
    probability: float
    box: BoxCXCYWH


@dataclass
class FrameDecision:
    frame_label: str
    regions: list[RegionDetection] = field(default_factory=list)


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str, group: str,
                 init_scale: float = 1.0):
        self.w = Parameter(init_scale * T.xavier_init(rng, (d_in, d_out), d_in, d_out),
                           f"{name}.w", group)
        self.b = Parameter(np.zeros(d_out), f"{name}.b", group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_row(T.matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, width: int, name: str, group: str):
        self.gain = Parameter(np.ones(width), f"{name}.gain", group)
        self.bias = Parameter(np.zeros(width), f"{name}.bias", group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return [self.gain, self.bias]


# Weights start small so AdamW's magnitude-normalized steps can reorganize
# them within the short fine-tuning-scale learning-rate budget; cross-attention
# Q/K start near a permuted identity that routes y- and x-encoding channels
# into every head, so each query initially attends around its own 2-D anchor
# position, and V keeps an identity component so the attended position stays
# linearly readable by the box branch (see Detector.__init__).
ATTN_INIT_SCALE = 0.3
CROSS_QK_IDENTITY = 1.5
CROSS_V_IDENTITY = 0.75
ANCHOR_BOX_SIDE = 0.36


def _head_interleave(d_model: int, n_heads: int) -> np.ndarray:
    """Permutation matrix giving every head half y- and half x-encoding dims."""
    half = d_model // 2
    if half % n_heads:
        return np.eye(d_model)
    band = half // n_heads
    perm = []
    for h in range(n_heads):
        perm += list(range(h * band, (h + 1) * band))
        perm += list(range(half + h * band, half + (h + 1) * band))
    matrix = np.zeros((d_model, d_model))
    matrix[perm, np.arange(d_model)] = 1.0
    return matrix


class MultiHeadAttention:
    def __init__(self, rng, d_model: int, n_heads: int, name: str, group: str,
                 anchored: bool = False):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.scale = 1.0 / math.sqrt(self.d_head)
        self.proj_q = Linear(rng, d_model, d_model, f"{name}.q", group, ATTN_INIT_SCALE)
        self.proj_k = Linear(rng, d_model, d_model, f"{name}.k", group, ATTN_INIT_SCALE)
        self.proj_v = Linear(rng, d_model, d_model, f"{name}.v", group, ATTN_INIT_SCALE)
        self.proj_out = Linear(rng, d_model, d_model, f"{name}.out", group, ATTN_INIT_SCALE)
        if anchored:
            route = _head_interleave(d_model, n_heads)
            self.proj_q.w.data += CROSS_QK_IDENTITY * route
            self.proj_k.w.data += CROSS_QK_IDENTITY * route
            self.proj_v.w.data += CROSS_V_IDENTITY * np.eye(d_model)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        q = self.proj_q(queries)
        k = self.proj_k(memory)
        v = self.proj_v(memory)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            attn = T.softmax(T.matmul(qh, T.transpose2d(kh)) * self.scale, axis=-1)
            heads.append(T.matmul(attn, vh))
        return self.proj_out(T.concat_cols(heads))

    def parameters(self):
        return (self.proj_q.parameters() + self.proj_k.parameters()
                + self.proj_v.parameters() + self.proj_out.parameters())


class FeedForward:
    def __init__(self, rng, d_model: int, d_hidden: int, name: str, group: str):
        self.lin1 = Linear(rng, d_model, d_hidden, f"{name}.lin1", group, ATTN_INIT_SCALE)
        self.lin2 = Linear(rng, d_hidden, d_model, f"{name}.lin2", group, ATTN_INIT_SCALE)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))

    def parameters(self):
        return self.lin1.parameters() + self.lin2.parameters()


class EncoderLayer:
    """Pre-norm self-attention block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng, cfg: ModelConfig, name: str):
        self.norm1 = LayerNorm(cfg.d_model, f"{name}.norm1", "transformer")
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, f"{name}.attn", "transformer")
        self.norm2 = LayerNorm(cfg.d_model, f"{name}.norm2", "transformer")
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim, f"{name}.ffn", "transformer")

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))

    def parameters(self):
        return (self.norm1.parameters() + self.attn.parameters()
                + self.norm2.parameters() + self.ffn.parameters())


class DecoderLayer:
    """Pre-norm block: query self-attention, cross-attention to memory, FFN."""

    def __init__(self, rng, cfg: ModelConfig, name: str):
        self.norm1 = LayerNorm(cfg.d_model, f"{name}.norm1", "transformer")
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads,
                                            f"{name}.self_attn", "transformer")
        self.norm2 = LayerNorm(cfg.d_model, f"{name}.norm2", "transformer")
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads,
                                             f"{name}.cross_attn", "transformer",
                                             anchored=True)
        self.norm3 = LayerNorm(cfg.d_model, f"{name}.norm3", "transformer")
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim, f"{name}.ffn", "transformer")

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ffn(self.norm3(x))

    def parameters(self):
        return (self.norm1.parameters() + self.self_attn.parameters()
                + self.norm2.parameters() + self.cross_attn.parameters()
                + self.norm3.parameters() + self.ffn.parameters())


class ConvNormRelu:
    """3x3 conv, per-position channel layer norm, relu.

    Normalizing across channels at each spatial position (rather than over
    space) keeps the backbone strictly local: a pixel can only influence
    outputs inside its receptive field. It also behaves at batch size 1.
    """

    def __init__(self, rng, c_in: int, c_out: int, stride: int, name: str):
        self.stride = stride
        self.w = Parameter(T.he_init(rng, (c_out, c_in, 3, 3), c_in * 9), f"{name}.w", "backbone")
        self.b = Parameter(np.zeros(c_out), f"{name}.b", "backbone")
        self.gain = Parameter(np.ones(c_out), f"{name}.gain", "backbone")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias", "backbone")

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, self.b, stride=self.stride, pad=1)
        return T.relu(T.norm_channels(y, self.gain, self.bias))

    def parameters(self):
        return [self.w, self.b, self.gain, self.bias]


class ResidualBlock:
    def __init__(self, rng, channels: int, name: str):
        self.conv1 = ConvNormRelu(rng, channels, channels, 1, f"{name}.conv1")
        self.conv2 = ConvNormRelu(rng, channels, channels, 1, f"{name}.conv2")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x))

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()


class Backbone:
    """Stride-2 stem, residual stages with stride-2 transitions, 1x1 projection."""

    def __init__(self, rng, cfg: ModelConfig):
        ch = cfg.backbone_channels
        self.stem = ConvNormRelu(rng, 3, ch[0], 2, "backbone.stem")
        self.stages = []
        self.transitions = []
        for i, c in enumerate(ch):
            self.stages.append(ResidualBlock(rng, c, f"backbone.stage{i}"))
            if i + 1 < len(ch):
                self.transitions.append(
                    ConvNormRelu(rng, c, ch[i + 1], 2, f"backbone.down{i}"))
        self.proj_w = Parameter(T.xavier_init(rng, (cfg.d_model, ch[-1], 1, 1), ch[-1], cfg.d_model),
                                "backbone.proj.w", "backbone")
        self.proj_b = Parameter(np.zeros(cfg.d_model), "backbone.proj.b", "backbone")

    def __call__(self, x: Tensor) -> list[Tensor]:
        """Run all stages; returns per-stage maps, projected map last."""
        maps = []
        x = self.stem(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            maps.append(x)
            if i < len(self.transitions):
                x = self.transitions[i](x)
        maps.append(T.conv2d(x, self.proj_w, self.proj_b))
        return maps

    def parameters(self):
        params = self.stem.parameters()
        for stage in self.stages:
            params += stage.parameters()
        for tr in self.transitions:
            params += tr.parameters()
        return params + [self.proj_w, self.proj_b]


# ---------------------------------------------------------------------------
# positional encoding

_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def positional_encoding_2d(d_model: int, h: int, w: int) -> np.ndarray:
    """Fixed sinusoidal table of shape (h*w, d_model), row-major over (y, x).

    The first d_model/2 channels encode the row index, the rest the column
    index; within each half, even channels are sines and odd are cosines on
    the usual geometric frequency ladder.
    """
    if d_model % 4:
        raise ShapeError(f"d_model {d_model} must be a multiple of 4")
    key = (d_model, h, w)
    if key in _POS_CACHE:
        return _POS_CACHE[key]
    half = d_model // 2
    freqs = 10000.0 ** (np.arange(half // 2) * 2.0 / half)

    def axis_table(n: int) -> np.ndarray:
        angles = np.arange(n)[:, None] / freqs[None, :]
        table = np.empty((n, half))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        return table

    ys = axis_table(h)
    xs = axis_table(w)
    enc = np.empty((h * w, d_model))
    enc[:, :half] = np.repeat(ys, w, axis=0)
    enc[:, half:] = np.tile(xs, (h, 1))
    _POS_CACHE[key] = enc
    return enc


def add_positional_encoding(features: Tensor, d_model: int) -> Tensor:
    """Flatten a (d, h, w) map row-major into (h*w, d) and add the fixed encoding."""
    if features.data.ndim != 3 or features.shape[0] != d_model:
        raise ShapeError(f"expected ({d_model}, h, w) features, got {features.shape}")
    d, h, w = features.shape
    seq = T.transpose2d(T.reshape(features, (d, h * w)))
    return seq + Tensor(positional_encoding_2d(d_model, h, w))


# ---------------------------------------------------------------------------
# detector


class Detector:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, cfg)
        self.enc_layers = [EncoderLayer(rng, cfg, f"encoder.layer{i}")
                           for i in range(cfg.enc_layers)]
        self.dec_layers = [DecoderLayer(rng, cfg, f"decoder.layer{i}")
                           for i in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(cfg.d_model, "decoder.norm", "transformer")
        self.query_embed = Parameter(self._anchor_queries(rng), "decoder.queries", "transformer")
        self.class_head = Linear(rng, cfg.d_model, cfg.n_categories, "head.class", "head")
        self.box_mlp1 = Linear(rng, cfg.d_model, cfg.d_model, "head.box1", "head")
        self.box_mlp2 = Linear(rng, cfg.d_model, cfg.d_model, "head.box2", "head")
        self.box_out = Linear(rng, cfg.d_model, 4, "head.box_out", "head")
        self._align_box_head_to_anchors()
        self._params = self._collect()

    def _anchor_queries(self, rng) -> np.ndarray:
        """Object queries start as the positional encodings of a coarse anchor
        grid over the feature map, so each query initially attends to (and
        stands for) its own neighborhood; training refines them from there."""
        cfg = self.cfg
        side = cfg.input_size // cfg.reduction
        g = math.ceil(math.sqrt(cfg.n_queries))
        enc = positional_encoding_2d(cfg.d_model, side, side)
        rows = []
        for i in range(g):
            for j in range(g):
                if len(rows) == cfg.n_queries:
                    break
                ay = int((0.15 + 0.7 * (i + 0.5) / g) * side)
                ax = int((0.15 + 0.7 * (j + 0.5) / g) * side)
                rows.append(enc[ay * side + ax])
        queries = np.array(rows[:cfg.n_queries])
        return queries + rng.normal(0.0, 0.05, queries.shape)

    def _anchor_centers(self) -> np.ndarray:
        """Normalized (cx, cy) of each query's anchor cell, matching the
        anchor grid used for the query embeddings."""
        g = math.ceil(math.sqrt(self.cfg.n_queries))
        centers = []
        for i in range(g):
            for j in range(g):
                if len(centers) == self.cfg.n_queries:
                    break
                # spread over [0.15, 0.85]: region centers cluster away from
                # the borders because regions must fit inside the frame
                centers.append((0.15 + 0.7 * (j + 0.5) / g, 0.15 + 0.7 * (i + 0.5) / g))
        return np.array(centers[:self.cfg.n_queries])

    def _align_box_head_to_anchors(self):
        """Solve the last box layer so each query initially predicts its anchor
        box. Without this the shared head emits near-identical boxes for every
        query, the bipartite matching degenerates to index order, and queries
        receive spatially inconsistent supervision for a long warm-up.

        Uses the decoder embeddings of a neutral gray frame; minimum-norm
        least squares, so it is deterministic and data-free.
        """
        neutral = Tensor(np.zeros((3, self.cfg.input_size, self.cfg.input_size)))
        maps = self.backbone(neutral)
        seq = add_positional_encoding(maps[-1], self.cfg.d_model)
        emb = self.decode(self.encode(seq))
        hidden = T.relu(self.box_mlp1(emb))
        hidden = T.relu(self.box_mlp2(hidden)).data

        targets = np.empty((self.cfg.n_queries, 4))
        targets[:, 0:2] = self._anchor_centers()
        targets[:, 2:4] = ANCHOR_BOX_SIDE
        logit_targets = np.log(targets / (1.0 - targets))

        design = np.hstack([hidden, np.ones((len(hidden), 1))])
        solution, *_ = np.linalg.lstsq(design, logit_targets, rcond=None)
        self.box_out.w.data = solution[:-1]
        self.box_out.b.data = solution[-1]

    def _collect(self):
        params = self.backbone.parameters()
        for layer in self.enc_layers:
            params += layer.parameters()
        for layer in self.dec_layers:
            params += layer.parameters()
        params += self.dec_norm.parameters() + [self.query_embed]
        params += self.class_head.parameters()
        params += self.box_mlp1.parameters() + self.box_mlp2.parameters()
        params += self.box_out.parameters()
        names = [p.name for p in params]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return params

    def parameters(self):
        return list(self._params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params)

    def _check_image(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        s = self.cfg.input_size
        if image.shape != (3, s, s):
            raise ShapeError(f"expected a (3, {s}, {s}) image, got {image.shape}")
        return image

    def extract_features(self, image) -> Tensor:
        return self.backbone(self._check_image(image))[-1]

    def encode(self, seq: Tensor) -> Tensor:
        # no terminal norm: token magnitudes carry content salience into the
        # decoder's attention scores
        for layer in self.enc_layers:
            seq = layer(seq)
        return seq

    def decode(self, memory: Tensor) -> Tensor:
        if memory.shape[1] != self.cfg.d_model:
            raise ShapeError(f"memory width {memory.shape[1]} != d_model {self.cfg.d_model}")
        x = self.query_embed
        for layer in self.dec_layers:
            x = layer(x, memory)
        return self.dec_norm(x)

    def predict_heads(self, embeddings: Tensor) -> PredictionSet:
        logits = self.class_head(embeddings)
        hidden = T.relu(self.box_mlp1(embeddings))
        hidden = T.relu(self.box_mlp2(hidden))
        boxes = T.sigmoid(self.box_out(hidden))
        return PredictionSet(logits=logits, boxes=boxes)

    def forward(self, image) -> PredictionSet:
        return self.forward_with_features(image)[0]

    def forward_with_features(self, image) -> tuple[PredictionSet, list[Tensor]]:
        """Forward pass that also exposes backbone maps (for activation maps)."""
        maps = self.backbone(self._check_image(image))
        seq = add_positional_encoding(maps[-1], self.cfg.d_model)
        memory = self.encode(seq)
        embeddings = self.decode(memory)
        return self.predict_heads(embeddings), maps


def classify_frame(preds: PredictionSet, threshold: float = 0.5) -> FrameDecision:
    """Apply the frame rule: bleeding iff some region is bleed with p > threshold.

    Each query is softmaxed; queries whose winning category is bleed or
    non-bleed and whose probability exceeds the threshold (strictly) become
    regions. Probability ties with background resolve to background.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    logits = preds.logits.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    regions = []
    for q in range(logits.shape[0]):
        p = probs[q]
        if p[BACKGROUND] == p.max():
            continue
        category = BLEED if p[BLEED] >= p[NON_BLEED] else NON_BLEED
        if p[category] > threshold:
            cx, cy, w, h = preds.boxes.data[q]
            regions.append(RegionDetection(CATEGORIES[category], float(p[category]),
                                           BoxCXCYWH(cx, cy, w, h)))
    bleeding = any(r.category == CATEGORIES[BLEED] for r in regions)
    return FrameDecision(BLEEDING if bleeding else NON_BLEEDING, regions)
