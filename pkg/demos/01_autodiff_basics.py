"""Tour of the float64 autodiff engine.

Builds a tiny computation, runs the backward sweep, and cross-checks a few
analytic gradients against central finite differences.
"""

import numpy as np

from wcedet import tensor as T
from wcedet.tensor import Tensor

rng = np.random.default_rng(0)

# forward graph: softmax of a tiny affine layer, summed against a target
x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
target = Tensor(rng.normal(size=(2, 4)))

logits = T.add_row(T.matmul(x, w), b)
probs = T.softmax(logits, axis=1)
loss = T.sum_all(T.mul(probs, target))
print(f"loss = {loss.item():.6f}")

T.backward(loss)
print("grad shapes:", x.grad.shape, w.grad.shape, b.grad.shape)

# finite-difference spot check on one weight entry
h = 1e-5
w.data[1, 2] += h
up = T.sum_all(T.mul(T.softmax(T.add_row(T.matmul(Tensor(x.data), Tensor(w.data)), Tensor(b.data)), axis=1), target)).item()
w.data[1, 2] -= 2 * h
down = T.sum_all(T.mul(T.softmax(T.add_row(T.matmul(Tensor(x.data), Tensor(w.data)), Tensor(b.data)), axis=1), target)).item()
w.data[1, 2] += h
fd = (up - down) / (2 * h)
print(f"analytic dw[1,2] = {w.grad[1, 2]:+.9f}")
print(f"numeric  dw[1,2] = {fd:+.9f}")
print(f"rel err          = {abs(w.grad[1, 2] - fd) / max(1, abs(fd)):.2e}")

# gradients accumulate until cleared
first = w.grad.copy()
loss2 = T.sum_all(T.mul(T.softmax(T.add_row(T.matmul(x, w), b), axis=1), target))
T.backward(loss2)
print("second backward doubles the gradient:", np.allclose(w.grad, 2 * first))

