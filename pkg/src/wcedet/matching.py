"""Optimal bipartite matching between query predictions and ground-truth
regions, and the weighted set loss (cross-entropy + L1 + generalized IoU).

The matching stage is gradient-free: the assignment is treated as a
constant while the loss differentiates through the matched predictions.
Default weights follow the 1 / 5 / 2 split for class, box L1, and GIoU.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BoxCXCYWH
from .model import BACKGROUND, PredictionSet
from .tensor import Tensor

logger = logging.getLogger(__name__)

MIN_SIDE = 1e-6  # predicted widths/heights are clamped here before overlap math


class MatchingError(ValueError):
    """Invalid cost matrix or assignment."""


@dataclass(frozen=True)
class LossWeights:
    w_class: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    background_weight: float = 0.1

    def __post_init__(self):
        if min(self.w_class, self.w_l1, self.w_giou, self.background_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class Assignment:
    """pairs[t] is the query index matched to target t; queries are distinct."""

    pairs: tuple[int, ...]
    total_cost: float


def _jv_solve(a: list[list[float]], m: int, n: int) -> list[int]:
    """Shortest augmenting path assignment on an m x n cost table, m <= n.

    Returns the query index chosen for each target. Potentials-based, the
    classic O(m n^2) formulation with a sentinel column 0.
    """
    inf = float("inf")
    u = [0.0] * (m + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: 1-based target matched to query j, 0 = free
    way = [0] * (n + 1)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    q_of_t = [0] * m
    for j in range(1, n + 1):
        if p[j]:
            q_of_t[p[j] - 1] = j - 1
    return q_of_t


def _min_cost(cost: np.ndarray, queries: list[int], targets: list[int]) -> float:
    """Optimal total cost of assigning `targets` to distinct `queries`."""
    if not targets:
        return 0.0
    sub = cost[np.ix_(queries, targets)].T.tolist()
    chosen = _jv_solve(sub, len(targets), len(queries))
    return float(sum(sub[t][q] for t, q in enumerate(chosen)))


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of every column (target) to a row (query).

    Ties between equally cheap assignments resolve lexicographically:
    target 0 takes the lowest usable query index, then target 1, and so on.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if m > n:
        raise MatchingError(f"{m} targets exceed {n} queries; the matrix must be tall")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix contains non-finite entries")
    if m == 0:
        return Assignment((), 0.0)

    best = _min_cost(cost, list(range(n)), list(range(m)))
    tol = 1e-9 * max(1.0, abs(best))

    # lexicographic refinement: fix targets in order, preferring low query ids,
    # keeping only choices that still extend to an optimal assignment
    pairs: list[int] = []
    free = list(range(n))
    fixed = 0.0
    for t in range(m):
        rest = list(range(t + 1, m))
        for qi, q in enumerate(free):
            total = fixed + cost[q, t] + _min_cost(cost, free[:qi] + free[qi + 1:], rest)
            if total <= best + tol:
                pairs.append(q)
                fixed += cost[q, t]
                free.pop(qi)
                break
        else:  # pragma: no cover - unreachable if the solver is correct
            raise MatchingError("tie refinement failed to extend an optimal assignment")

    total_cost = float(np.sum(cost[pairs, np.arange(m)]))
    return Assignment(tuple(pairs), total_cost)


# ---------------------------------------------------------------------------
# cost construction and loss


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _boxes_cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    out = np.empty_like(b)
    out[:, 0] = b[:, 0] - b[:, 2] / 2
    out[:, 1] = b[:, 1] - b[:, 3] / 2
    out[:, 2] = b[:, 0] + b[:, 2] / 2
    out[:, 3] = b[:, 1] + b[:, 3] / 2
    return out


def _giou_against(boxes: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Vectorized GIoU of every xyxy row in `boxes` against one xyxy box."""
    iw = np.minimum(boxes[:, 2], target[2]) - np.maximum(boxes[:, 0], target[0])
    ih = np.minimum(boxes[:, 3], target[3]) - np.maximum(boxes[:, 1], target[1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_t = (target[2] - target[0]) * (target[3] - target[1])
    union = area + area_t - inter
    enc = ((np.maximum(boxes[:, 2], target[2]) - np.minimum(boxes[:, 0], target[0]))
           * (np.maximum(boxes[:, 3], target[3]) - np.minimum(boxes[:, 1], target[1])))
    return inter / union - (enc - union) / enc


def matching_cost(preds: PredictionSet, targets, w: LossWeights = LossWeights()) -> np.ndarray:
    """Cost matrix (n_queries, m_targets) combining class, L1 and GIoU terms.

    The class term uses plain probabilities (not logs): cost is
    -p_q(category_t), so a confident correct query is cheap to match.
    """
    logits = preds.logits.data
    raw = preds.boxes.data
    probs = _softmax_rows(logits)
    clamped = raw.copy()
    clamped[:, 2:4] = np.maximum(clamped[:, 2:4], MIN_SIDE)
    xyxy = _boxes_cxcywh_to_xyxy(clamped)

    n = logits.shape[0]
    cost = np.zeros((n, len(targets)))
    for t, (category, box) in enumerate(targets):
        if category not in (0, 1):
            raise MatchingError(f"target category must be bleed(0) or non-bleed(1), got {category}")
        tb = np.array([box.cx, box.cy, box.w, box.h])
        l1 = np.abs(raw - tb).sum(axis=1)
        g = _giou_against(xyxy, _boxes_cxcywh_to_xyxy(tb[None])[0])
        cost[:, t] = -w.w_class * probs[:, category] + w.w_l1 * l1 - w.w_giou * g
    return cost


_clamp_logged = False


def reset_clamp_log():
    """Re-arm the once-per-epoch degenerate-box warning."""
    global _clamp_logged
    _clamp_logged = False


def _note_clamped(count: int):
    global _clamp_logged
    if not _clamp_logged:
        logger.warning("clamped %d degenerate predicted box sides to %g", count, MIN_SIDE)
        _clamp_logged = True


def set_loss(preds: PredictionSet, targets, assignment: Assignment,
             w: LossWeights = LossWeights()) -> Tensor:
    """Differentiable total loss for one image under a fixed assignment.

    Cross-entropy runs over all queries (unmatched ones train toward
    background at reduced weight); the L1 and (1 - GIoU) terms average over
    matched pairs only. Returns a scalar graph node whose `components`
    attribute holds the unweighted term values for logging.
    """
    logits, boxes = preds.logits, preds.boxes
    n = logits.shape[0]
    m = len(targets)
    pairs = assignment.pairs
    if len(pairs) != m or len(set(pairs)) != len(pairs):
        raise MatchingError(f"assignment pairs {pairs} do not fit {m} targets")
    if pairs and (min(pairs) < 0 or max(pairs) >= n):
        raise MatchingError(f"assignment pairs {pairs} out of range for {n} queries")

    labels = np.full(n, BACKGROUND)
    weights = np.full(n, w.background_weight)
    for t, q in enumerate(pairs):
        labels[q] = targets[t][0]
        weights[q] = 1.0

    weight_matrix = np.zeros((n, logits.shape[1]))
    weight_matrix[np.arange(n), labels] = weights
    logp = T.log_softmax(logits, axis=1)
    ce = T.sum_all(T.mul(logp, Tensor(weight_matrix))) * (-1.0 / weights.sum())

    if m == 0:
        total = ce * w.w_class
        total.components = {"ce": ce.item(), "l1": 0.0, "giou": 0.0}
        return total

    tb = np.array([[b.cx, b.cy, b.w, b.h] for _, b in targets])
    matched = T.gather_rows(boxes, list(pairs))

    under = int((matched.data[:, 2:4] < MIN_SIDE).sum())
    if under:
        _note_clamped(under)

    # L1 on raw coordinates, mean over matched pairs
    l1 = T.sum_all(T.absolute(matched - Tensor(tb))) * (1.0 / m)

    # GIoU on side-clamped boxes
    cx = T.slice_cols(matched, 0, 1)
    cy = T.slice_cols(matched, 1, 2)
    bw = T.maximum(T.slice_cols(matched, 2, 3), MIN_SIDE)
    bh = T.maximum(T.slice_cols(matched, 3, 4), MIN_SIDE)
    ax1, ax2 = cx - bw * 0.5, cx + bw * 0.5
    ay1, ay2 = cy - bh * 0.5, cy + bh * 0.5

    txyxy = _boxes_cxcywh_to_xyxy(tb)
    bx1, by1 = Tensor(txyxy[:, 0:1]), Tensor(txyxy[:, 1:2])
    bx2, by2 = Tensor(txyxy[:, 2:3]), Tensor(txyxy[:, 3:4])
    area_t = Tensor(((txyxy[:, 2] - txyxy[:, 0]) * (txyxy[:, 3] - txyxy[:, 1]))[:, None])

    iw = T.relu(T.minimum(ax2, bx2) - T.maximum(ax1, bx1))
    ih = T.relu(T.minimum(ay2, by2) - T.maximum(ay1, by1))
    inter = iw * ih
    union = bw * bh + area_t - inter
    enc = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    g = inter / union - (enc - union) / enc
    giou_loss = (float(m) - T.sum_all(g)) * (1.0 / m)

    total = ce * w.w_class + l1 * w.w_l1 + giou_loss * w.w_giou
    total.components = {"ce": ce.item(), "l1": l1.item(), "giou": giou_loss.item()}
    return total


def criterion(preds: PredictionSet, targets,
              w: LossWeights = LossWeights()) -> tuple[Tensor, Assignment]:
    """Match, then score: Hungarian assignment (constant) plus the set loss."""
    n = preds.logits.shape[0]
    if len(targets) > n:
        raise MatchingError(f"{len(targets)} targets exceed {n} queries")
    if targets:
        assignment = hungarian(matching_cost(preds, targets, w))
    else:
        assignment = Assignment((), 0.0)
    return set_loss(preds, targets, assignment, w), assignment


def targets_from_regions(regions, width: int, height: int) -> list[tuple[int, BoxCXCYWH]]:
    """Convert absolute-pixel annotation regions to (category, normalized box)."""
    out = []
    for category, box in regions:
        cx = (box.x_min + box.x_max) / 2.0 / width
        cy = (box.y_min + box.y_max) / 2.0 / height
        out.append((category, BoxCXCYWH(cx, cy,
                                        (box.x_max - box.x_min) / width,
                                        (box.y_max - box.y_min) / height)))
    return out
