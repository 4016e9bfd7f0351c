"""Optimal assignment between predictions and ground-truth regions.

Solves random cost matrices and verifies the result against brute-force
enumeration, then shows how the matching feeds the set loss.
"""

import itertools

import numpy as np

from wcedet.geometry import BoxCXCYWH
from wcedet.matching import criterion, hungarian, matching_cost
from wcedet.model import PredictionSet
from wcedet.tensor import Tensor

rng = np.random.default_rng(42)

cost = rng.uniform(0, 10, size=(5, 3))
out = hungarian(cost)
print("cost matrix (queries x targets):")
print(np.round(cost, 2))
print(f"assignment: {dict(enumerate(out.pairs))} (target -> query), "
      f"total cost {out.total_cost:.4f}")

best = min(
    (sum(cost[q, t] for t, q in enumerate(perm)), perm)
    for perm in itertools.permutations(range(5), 3)
)
print(f"brute force over P(5,3) arrangements agrees: {best[1] == out.pairs}")

# a miniature matching + loss round: two targets, four query slots
logits = rng.normal(size=(4, 3))
boxes = rng.uniform(0.3, 0.7, size=(4, 4)) * np.array([1, 1, 0.5, 0.5])
preds = PredictionSet(logits=Tensor(logits, requires_grad=True),
                      boxes=Tensor(boxes, requires_grad=True))
targets = [(0, BoxCXCYWH(0.35, 0.4, 0.2, 0.25)), (1, BoxCXCYWH(0.65, 0.6, 0.3, 0.2))]

print("\nmatching cost for the miniature detection problem:")
print(np.round(matching_cost(preds, targets), 3))
loss, assignment = criterion(preds, targets)
print(f"matched pairs: {dict(enumerate(assignment.pairs))}")
print(f"set loss = {loss.item():.4f}  components: "
      + ", ".join(f"{k}={v:.4f}" for k, v in loss.components.items()))
