"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every forward pass builds a fresh DAG of `Tensor`
nodes, and `backward()` runs one reverse topological sweep over it.
Gradients accumulate across backward calls; callers zero them between
optimizer steps.

Shape discipline is strict. Binary elementwise operations demand equal
shapes (a Python scalar is the only broadcast operand), biases go through
the explicit `add_row`, and reshapes are always spelled out. This trades a
little verbosity for the absence of silent-broadcast bugs.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

GROUPS = ("backbone", "transformer", "head")


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """One node of the computation graph.

    `data` is the forward value (row-major float64 ndarray), `grad` the
    lazily allocated gradient buffer of the same shape. Non-leaf nodes
    carry a `_backward` closure that routes the incoming gradient to the
    parent nodes.
    """

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = ""):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.op or ("param" if self.requires_grad and not self._parents else "const")
        return f"Tensor(shape={self.shape}, op={tag!r})"

    # arithmetic sugar; scalars are the only implicit broadcast
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return absolute(self)

    def sum(self):
        return sum_all(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a name path and an optimizer group."""

    def __init__(self, data, name: str, group: str):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}, expected one of {GROUPS}")
        super().__init__(data, requires_grad=True)
        self.name = name
        self.group = group

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(node: Tensor, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        # copy: backward closures may hand out views / shared buffers
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: operand shapes differ, {a.shape} vs {b.shape}")


def _make(data, parents, backward, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("add needs at least one Tensor operand")
    if not isinstance(b, Tensor) or not isinstance(a, Tensor):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        out_data = t.data + float(s)

        def bw(g):
            _accumulate(t, g)

        return _make(out_data, (t,), bw, "add_scalar")

    _check_same_shape(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(neg(b), float(a))
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) or not isinstance(a, Tensor):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        c = float(s)

        def bw(g):
            _accumulate(t, g * c)

        return _make(t.data * c, (t,), bw, "mul_scalar")

    _check_same_shape(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        c = float(a)
        out_data = c / b.data

        def bw_r(g):
            _accumulate(b, -g * c / (b.data * b.data))

        return _make(out_data, (b,), bw_r, "div_scalar")

    _check_same_shape(a, b, "div")

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), bw, "div")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to keep exp() away from overflow
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), bw, "abs")


def maximum(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.full_like(_wrap(a).data, float(b)))
    if not isinstance(a, Tensor):
        a = Tensor(np.full_like(b.data, float(a)))
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data  # ties route the gradient to the first operand

    def bw(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.full_like(_wrap(a).data, float(b)))
    if not isinstance(a, Tensor):
        a = Tensor(np.full_like(b.data, float(a)))
    _check_same_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "minimum")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-C row vector to every row of a (R, C) matrix."""
    if x.data.ndim != 2 or row.data.ndim != 1 or x.shape[1] != row.shape[0]:
        raise ShapeError(f"add_row: matrix {x.shape} vs row {row.shape}")

    def bw(g):
        _accumulate(x, g)
        _accumulate(row, g.sum(axis=0))

    return _make(x.data + row.data, (x, row), bw, "add_row")


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-D tensor, got {x.shape}")

    def bw(g):
        _accumulate(x, g.T)

    return _make(x.data.T.copy(), (x,), bw, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] invalid for shape {x.shape}")

    def bw(g):
        full = np.zeros(x.shape)
        full[:, j0:j1] = g
        _accumulate(x, full)

    return _make(x.data[:, j0:j1].copy(), (x,), bw, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols: all parts must be 2-D with equal row counts")
    widths = [p.shape[1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bw(g):
        for p, o0, o1 in zip(parts, offs[:-1], offs[1:]):
            _accumulate(p, g[:, o0:o1])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw, "concat_cols")


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"gather_rows: indices out of range for shape {x.shape}")

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(x.data[idx].copy(), (x,), bw, "gather_rows")


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _make(x.data.sum(), (x,), bw, "sum")


# ---------------------------------------------------------------------------
# normalization and attention-flavored primitives


def _check_axis(x: Tensor, axis: int, opname: str) -> int:
    nd = x.data.ndim
    if not (-nd <= axis < nd):
        raise ShapeError(f"{opname}: axis {axis} invalid for shape {x.shape}")
    return axis % nd


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bw(g):
        _accumulate(x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bw, "log_softmax")


def norm_channels(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize a (C, H, W) map across channels independently at each pixel,
    then apply a per-channel affine. Same math as layer_norm with the channel
    axis as the row, without the transpose round trip."""
    if x.data.ndim != 3:
        raise ShapeError(f"norm_channels needs a 3-D tensor, got {x.shape}")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"norm_channels: gain/bias lengths {gain.shape}/{bias.shape} do not match {c} channels")

    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data[:, None, None] + bias.data[:, None, None]

    def bw(g):
        _accumulate(gain, (g * xhat).sum(axis=(1, 2)))
        _accumulate(bias, g.sum(axis=(1, 2)))
        gx = g * gain.data[:, None, None]
        corr = gx - gx.mean(axis=0, keepdims=True) - xhat * (gx * xhat).mean(axis=0, keepdims=True)
        _accumulate(x, corr * inv)

    return _make(out_data, (x, gain, bias), bw, "norm_channels")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a (R, W) matrix followed by a (W,) affine."""
    data = x.data
    if data.ndim == 1:
        data = data.reshape(1, -1)
    if data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 1-D or 2-D tensor, got {x.shape}")
    w = data.shape[1]
    if gain.shape != (w,) or bias.shape != (w,):
        raise ShapeError(
            f"layer_norm: gain/bias lengths {gain.shape}/{bias.shape} do not match row width {w}")

    mu = data.mean(axis=1, keepdims=True)
    var = data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu) * inv
    out_data = (xhat * gain.data + bias.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(data.shape)
        _accumulate(gain, (g2 * xhat).sum(axis=0))
        _accumulate(bias, g2.sum(axis=0))
        gx = g2 * gain.data
        # d/dx of (x - mu) / sqrt(var + eps), all per row
        corr = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        _accumulate(x, (corr * inv).reshape(x.shape))

    return _make(out_data, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with a (C_out, C_in, kh, kw) kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need 3-D input and 4-D kernel, got {x.shape} and {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}/{pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data

    cols = np.empty((c_in, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols_mat = cols.reshape(c_in * kh * kw, ho * wo)
    kmat = kernel.data.reshape(c_out, -1)
    out_data = (kmat @ cols_mat).reshape(c_out, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gmat = g.reshape(c_out, -1)
        _accumulate(kernel, (gmat @ cols_mat.T).reshape(kernel.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c_in, kh, kw, ho, wo)
            gpad = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            _accumulate(x, gpad[:, pad:pad + h, pad:pad + w] if pad else gpad)

    return _make(out_data, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# backward driver


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from `root` through grad-requiring parents, parents first.

    Iterative post-order; each node appears exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate gradients of every grad-requiring node reachable from `loss`.

    Gradients accumulate: call `zero_grad` on parameters between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    _accumulate(loss, np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# initializers


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def xavier_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
