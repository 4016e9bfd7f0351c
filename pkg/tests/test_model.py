import time

import numpy as np
import pytest

from wcedet import tensor as T
from wcedet.geometry import BoxCXCYWH
from wcedet.matching import criterion, matching_cost, hungarian, set_loss
from wcedet.model import (BLEEDING, NON_BLEEDING, Detector, ModelConfig, PredictionSet,
                          add_positional_encoding, classify_frame, positional_encoding_2d)
from wcedet.tensor import ShapeError, Tensor

from fdcheck import numeric_grad

TINY = ModelConfig(d_model=8, n_heads=2, enc_layers=1, dec_layers=1, n_queries=4,
                   backbone_channels=(4, 4, 8), input_size=16)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)  # not divisible
    with pytest.raises(ValueError):
        ModelConfig(n_categories=4)
    with pytest.raises(ValueError):
        ModelConfig(input_size=60)  # not divisible by reduction 8
    assert ModelConfig().reduction == 8


def test_feature_shape_contract():
    model = Detector(ModelConfig(), seed=0)
    feats = model.extract_features(np.zeros((3, 64, 64)))
    assert feats.shape == (32, 8, 8)


def test_zero_image_finite_features():
    model = Detector(ModelConfig(), seed=1)
    feats = model.extract_features(np.zeros((3, 64, 64)))
    assert np.isfinite(feats.data).all()


def test_wrong_input_shape_rejected():
    model = Detector(ModelConfig(), seed=0)
    with pytest.raises(ShapeError):
        model.extract_features(np.zeros((3, 32, 32)))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 64, 64)))


def _affected_interval(lo, hi, layers, size):
    """Propagate an affected index interval through (kernel, stride, pad) convs."""
    for k, s, p in layers:
        lo = max(0, -(-(lo + p - k + 1) // s))  # ceil division
        hi = (hi + p) // s
        size = (size + 2 * p - k) // s + 1
        hi = min(hi, size - 1)
    return lo, hi, size


def test_feature_locality_respects_receptive_field():
    cfg = ModelConfig(input_size=128)
    model = Detector(cfg, seed=2)
    rng = np.random.default_rng(3)
    image = rng.uniform(0, 1, (3, 128, 128))
    bumped = image.copy()
    y, x = 5, 7
    bumped[:, y, x] += 0.5

    base = model.extract_features(image).data
    moved = model.extract_features(bumped).data

    # conv ladder of the backbone: stem, stage convs, downsamples, projection
    layers = [(3, 2, 1), (3, 1, 1), (3, 1, 1), (3, 2, 1), (3, 1, 1), (3, 1, 1),
              (3, 2, 1), (3, 1, 1), (3, 1, 1), (1, 1, 0)]
    y_lo, y_hi, size = _affected_interval(y, y, layers, 128)
    x_lo, x_hi, _ = _affected_interval(x, x, layers, 128)
    assert size == 16

    changed = np.argwhere(np.any(base != moved, axis=0))
    assert changed.size > 0
    assert changed[:, 0].min() >= y_lo and changed[:, 0].max() <= y_hi
    assert changed[:, 1].min() >= x_lo and changed[:, 1].max() <= x_hi
    outside = np.ones((16, 16), dtype=bool)
    outside[y_lo:y_hi + 1, x_lo:x_hi + 1] = False
    assert np.array_equal(base[:, outside], moved[:, outside])


def test_positional_encoding_origin_and_shape():
    enc = positional_encoding_2d(32, 8, 8)
    assert enc.shape == (64, 32)
    origin = enc[0]
    assert np.array_equal(origin[0::2], np.zeros(16))  # sines at position 0
    assert np.array_equal(origin[1::2], np.ones(16))   # cosines at position 0


def test_positional_encoding_rows_distinct():
    enc = positional_encoding_2d(32, 8, 8)
    for i in range(64):
        for j in range(i + 1, 64):
            assert not np.array_equal(enc[i], enc[j])


def test_add_positional_encoding_flattens_row_major():
    model = Detector(ModelConfig(), seed=0)
    feats = Tensor(np.arange(32 * 8 * 8, dtype=np.float64).reshape(32, 8, 8))
    seq = add_positional_encoding(feats, 32)
    assert seq.shape == (64, 32)
    enc = positional_encoding_2d(32, 8, 8)
    # row i*w+j must come from feats[:, i, j]
    assert np.allclose(seq.data[9], feats.data[:, 1, 1] + enc[9])
    with pytest.raises(ShapeError):
        add_positional_encoding(Tensor(np.zeros((16, 8, 8))), 32)


def test_encoder_single_token_and_shape():
    model = Detector(ModelConfig(), seed=4)
    one = model.encode(Tensor(np.random.default_rng(0).normal(size=(1, 32))))
    assert one.shape == (1, 32)
    assert np.isfinite(one.data).all()
    seq = model.encode(Tensor(np.random.default_rng(1).normal(size=(10, 32))))
    assert seq.shape == (10, 32)


def test_encoder_permutation_equivariance_without_positions():
    model = Detector(ModelConfig(), seed=5)
    rng = np.random.default_rng(6)
    seq = rng.normal(size=(12, 32))
    perm = rng.permutation(12)
    out = model.encode(Tensor(seq)).data
    out_perm = model.encode(Tensor(seq[perm])).data
    assert np.allclose(out_perm, out[perm], atol=1e-12)


def test_decoder_shape_and_constant_memory_independence():
    model = Detector(ModelConfig(), seed=7)
    out = model.decode(Tensor(np.zeros((64, 32))))
    assert out.shape == (8, 32)
    # attention over constant values is the same regardless of memory length
    short = model.decode(Tensor(np.zeros((16, 32))))
    assert np.allclose(out.data, short.data, atol=1e-12)


def test_decoder_gradients_reach_queries_and_memory():
    model = Detector(ModelConfig(), seed=8)
    memory = Tensor(np.random.default_rng(9).normal(size=(64, 32)), requires_grad=True)
    out = model.decode(memory)
    T.backward(T.sum_all(out))
    assert memory.grad is not None and np.abs(memory.grad).max() > 0
    assert model.query_embed.grad is not None and np.abs(model.query_embed.grad).max() > 0
    T.zero_grads(model.parameters())


def test_heads_contract():
    model = Detector(ModelConfig(), seed=10)
    emb = Tensor(np.random.default_rng(11).normal(size=(8, 32)))
    preds = model.predict_heads(emb)
    assert preds.logits.shape == (8, 3)
    assert preds.boxes.shape == (8, 4)
    assert (preds.boxes.data > 0).all() and (preds.boxes.data < 1).all()
    probs = np.exp(preds.logits.data - preds.logits.data.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    assert np.abs(probs.sum(1) - 1).max() < 1e-12


def test_heads_zero_embeddings_deterministic():
    model = Detector(ModelConfig(), seed=12)
    a = model.predict_heads(Tensor(np.zeros((8, 32))))
    b = model.predict_heads(Tensor(np.zeros((8, 32))))
    assert np.array_equal(a.boxes.data, b.boxes.data)
    # with zero weights times zero input, boxes reduce to sigmoid of the biases
    hidden = np.maximum(model.box_mlp1.b.data, 0)
    hidden = np.maximum(hidden @ model.box_mlp2.w.data + model.box_mlp2.b.data, 0)
    expected = 1 / (1 + np.exp(-(hidden @ model.box_out.w.data + model.box_out.b.data)))
    assert np.allclose(a.boxes.data, expected, atol=1e-12)


def test_forward_deterministic_and_fast():
    model = Detector(ModelConfig(), seed=13)
    image = np.random.default_rng(14).uniform(0, 1, (3, 64, 64))
    model.forward(image)  # warm the positional-encoding cache
    start = time.perf_counter()
    a = model.forward(image)
    elapsed = time.perf_counter() - start
    b = model.forward(image)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert a.boxes.data.tobytes() == b.boxes.data.tobytes()
    assert elapsed < 1.0


def test_parameter_budget_and_groups():
    model = Detector(ModelConfig(), seed=0)
    assert model.parameter_count() < 200_000
    groups = {p.group for p in model.parameters()}
    assert groups == {"backbone", "transformer", "head"}
    for p in model.parameters():
        assert p.requires_grad


def test_end_to_end_gradient_matches_finite_differences():
    model = Detector(TINY, seed=15)
    rng = np.random.default_rng(16)
    image = rng.uniform(0, 1, (3, 16, 16))
    targets = [(0, BoxCXCYWH(0.4, 0.4, 0.3, 0.3))]

    preds = model.forward(image)
    _, assignment = criterion(preds, targets)

    def loss_value():
        return set_loss(model.forward(image), targets, assignment).item()

    T.zero_grads(model.parameters())
    T.backward(set_loss(model.forward(image), targets, assignment))

    checked = 0
    for name in ("backbone.stem.w", "encoder.layer0.attn.q.w", "decoder.queries",
                 "head.class.w", "head.box_out.w"):
        p = next(q for q in model.parameters() if q.name == name)
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=3, replace=False):
            old = flat[idx]
            flat[idx] = old + 1e-5
            up = loss_value()
            flat[idx] = old - 1e-5
            down = loss_value()
            flat[idx] = old
            fd = (up - down) / 2e-5
            assert abs(gflat[idx] - fd) / max(1.0, abs(fd)) < 1e-4, name
            checked += 1
    assert checked == 15
    T.zero_grads(model.parameters())


def test_no_nan_gradients_fuzz():
    model = Detector(TINY, seed=17)
    rng = np.random.default_rng(18)
    for _ in range(100):
        image = rng.uniform(0, 1, (3, 16, 16))
        m = int(rng.integers(0, 3))
        targets = []
        for _t in range(m):
            w, h = rng.uniform(0.1, 0.4, 2)
            targets.append((int(rng.integers(0, 2)),
                            BoxCXCYWH(rng.uniform(w / 2, 1 - w / 2),
                                      rng.uniform(h / 2, 1 - h / 2), w, h)))
        loss, _ = criterion(model.forward(image), targets)
        T.backward(loss)
        for p in model.parameters():
            if p.grad is not None:
                assert np.isfinite(p.grad).all(), p.name
        T.zero_grads(model.parameters())


# ---------------------------------------------------------------------------
# frame rule


def _prediction_set(logits, boxes=None):
    n = len(logits)
    if boxes is None:
        boxes = np.full((n, 4), 0.5)
    return PredictionSet(logits=Tensor(np.asarray(logits, dtype=np.float64)),
                         boxes=Tensor(np.asarray(boxes, dtype=np.float64)))


def _logits_for_prob(p0: float):
    """Logits [log(p0), ?, ?] giving softmax p0 on the bleed slot."""
    rest = (1 - p0) / 2
    return [np.log(p0), np.log(rest), np.log(rest)]


def test_classify_frame_bleed_above_threshold():
    decision = classify_frame(_prediction_set([_logits_for_prob(0.6)]))
    assert decision.frame_label == BLEEDING
    assert len(decision.regions) == 1
    assert decision.regions[0].category == "bleed"
    assert abs(decision.regions[0].probability - 0.6) < 1e-12


def test_classify_frame_all_background():
    logits = np.zeros((8, 3))
    logits[:, 2] = 9.0
    decision = classify_frame(_prediction_set(logits))
    assert decision.frame_label == NON_BLEEDING
    assert decision.regions == []


def test_classify_frame_exactly_half_is_not_bleeding():
    # exp(-800) underflows to zero, so the bleed probability is exactly 0.5
    decision = classify_frame(_prediction_set([[0.0, 0.0, -800.0]]))
    assert decision.frame_label == NON_BLEEDING
    assert decision.regions == []


def test_classify_frame_just_above_half_is_bleeding():
    decision = classify_frame(_prediction_set([_logits_for_prob(0.5 + 1e-9)]))
    assert decision.frame_label == BLEEDING


def test_classify_frame_background_wins_ties():
    decision = classify_frame(_prediction_set([[1.0, 1.0, 1.0]]))
    assert decision.regions == []
    assert decision.frame_label == NON_BLEEDING


def test_classify_frame_non_bleed_region_does_not_mark_frame():
    logits = [[np.log(0.1), np.log(0.8), np.log(0.1)]]
    decision = classify_frame(_prediction_set(logits))
    assert decision.frame_label == NON_BLEEDING
    assert len(decision.regions) == 1
    assert decision.regions[0].category == "non-bleed"


def test_classify_frame_monotone_in_threshold():
    rng = np.random.default_rng(19)
    for _ in range(50):
        preds = _prediction_set(rng.normal(size=(8, 3)) * 2,
                                rng.uniform(0.2, 0.8, (8, 4)))
        low = classify_frame(preds, threshold=0.4)
        high = classify_frame(preds, threshold=0.7)
        assert len(high.regions) <= len(low.regions)


def test_classify_frame_threshold_validation():
    with pytest.raises(ValueError):
        classify_frame(_prediction_set([[0.0, 0.0, 0.0]]), threshold=0.0)
    with pytest.raises(ValueError):
        classify_frame(_prediction_set([[0.0, 0.0, 0.0]]), threshold=1.0)
