import numpy as np
import pytest

from wcedet import tensor as T
from wcedet.tensor import Parameter, ShapeError, Tensor

from fdcheck import apart, away_from, op_gradcheck, rel_err, numeric_grad


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_product():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_sum_case():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


def test_conv2d_padded_window_counts():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
    expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    assert np.array_equal(out.data[0], expected)


def test_conv2d_stride_shape():
    out = T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 2, 2)


def test_conv2d_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError, match="larger than padded input"):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + 17.25), axis=1).data
    assert np.allclose(a, b, atol=1e-14)


def test_softmax_hand_values():
    out = T.softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
    assert np.allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=(6, 4)) * 10
        s = T.softmax(Tensor(x), axis=1).data.sum(axis=1)
        assert np.abs(s - 1.0).max() < 1e-12


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError, match="axis"):
        T.softmax(Tensor(np.zeros((2, 2))), axis=2)


def test_layer_norm_constant_row_is_bias():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = T.layer_norm(Tensor(np.full((2, 4), 3.0)), gain, bias)
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_point_row():
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_affine_dominance():
    out = T.layer_norm(Tensor([[1.0, 2.0, 5.0]]), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)))
    assert np.allclose(out.data, 5.0, atol=1e-12)


def test_layer_norm_length_mismatch():
    with pytest.raises(ShapeError, match="row width"):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_relu_sigmoid_mul_basics():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert np.array_equal(T.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8.0, 15.0])


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((2, 1))), Tensor(np.zeros((1, 2))))


def test_sigmoid_strictly_inside_unit_interval():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, size=500)
    y = T.sigmoid(Tensor(x)).data
    assert (y > 0).all() and (y < 1).all()


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(T.mul(x, x))


def test_backward_accumulates_without_zeroing():
    x = Tensor([1.0, -2.0], requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    first = x.grad.copy()
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.array_equal(x.grad, 2.0 * first)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    err = op_gradcheck(T.matmul, [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))])
    assert err < 1e-6


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 6))
    k = rng.normal(size=(2, 1, 3, 3))

    def run():
        a = Tensor(x)
        out = T.softmax(T.matmul(a, T.transpose2d(a)), axis=1)
        conv = T.conv2d(Tensor(x.reshape(1, 5, 6)), Tensor(k), pad=1)
        return out.data.tobytes() + conv.data.tobytes()

    assert run() == run()


def test_topo_order_visits_each_node_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)  # diamond: y feeds z twice
    loss = T.sum_all(z)
    order = T.topo_order(loss)
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    assert id(y) in ids and id(loss) in ids


def test_shared_node_gradient_is_correct():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum_all(T.add(y, y)))
    # d/dx of 2 * x^2
    assert np.allclose(x.grad, [4.0, 8.0])


def test_aliased_add_parents_do_not_share_grad_buffers():
    a = Tensor([1.0, 1.0], requires_grad=True)
    b = Tensor([2.0, 2.0], requires_grad=True)
    s = T.add(a, b)
    loss = T.sum_all(T.add(s, T.mul(a, Tensor([3.0, 3.0]))))
    T.backward(loss)
    assert np.allclose(a.grad, [4.0, 4.0])
    assert np.allclose(b.grad, [1.0, 1.0])


def test_parameter_group_validation():
    with pytest.raises(ValueError, match="group"):
        Parameter(np.zeros(2), "p", "decoder")
    p = Parameter(np.zeros(2), "p", "head")
    assert p.requires_grad and p.group == "head"


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, (4, 4))
    outs = [
        T.softmax(Tensor(x), axis=0),
        T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))),
        T.sigmoid(Tensor(x * 100)),
        T.log_softmax(Tensor(x * 100), axis=1),
    ]
    for out in outs:
        assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# per-primitive gradient fidelity, 100 trials each (spec tolerance 1e-6)


def _smooth_cases(rng):
    m = rng.uniform(-2, 2, (3, 4))
    n = rng.uniform(-2, 2, (3, 4))
    pos = rng.uniform(0.5, 2.5, (3, 4))
    return {
        "add": (T.add, [m, n]),
        "sub": (T.sub, [m, n]),
        "mul": (T.mul, [m, n]),
        "div": (T.div, [m, pos]),
        "neg": (T.neg, [m]),
        "sigmoid": (T.sigmoid, [m]),
        "matmul": (T.matmul, [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))]),
        "add_row": (T.add_row, [m, rng.uniform(-2, 2, 4)]),
        "conv2d": (lambda x, k, b: T.conv2d(x, k, b, stride=2, pad=1),
                   [rng.uniform(-2, 2, (2, 5, 5)), rng.uniform(-2, 2, (3, 2, 3, 3)),
                    rng.uniform(-2, 2, 3)]),
        "softmax": (lambda x: T.softmax(x, axis=1), [m]),
        "log_softmax": (lambda x: T.log_softmax(x, axis=1), [m]),
        "layer_norm": (T.layer_norm, [m, rng.uniform(-2, 2, 4), rng.uniform(-2, 2, 4)]),
        "norm_channels": (T.norm_channels,
                          [rng.uniform(-2, 2, (3, 2, 4)), rng.uniform(-2, 2, 3),
                           rng.uniform(-2, 2, 3)]),
        "transpose": (T.transpose2d, [m]),
        "reshape": (lambda x: T.reshape(x, (2, 6)), [m]),
        "slice_cols": (lambda x: T.slice_cols(x, 1, 3), [m]),
        "concat_cols": (lambda a, b: T.concat_cols([a, b]), [m, n]),
        "gather_rows": (lambda x: T.gather_rows(x, [2, 0, 2]), [m]),
        "sum": (T.sum_all, [m]),
        "scalar_mix": (lambda x: (2.5 * x + 1.0) / 2.0 - 0.25, [m]),
        "rdiv": (lambda x: 1.5 / x, [pos]),
    }


def _kink_cases(rng):
    a, b = apart(rng, (3, 4))
    return {
        "relu": (T.relu, [away_from(rng, (3, 4))]),
        "abs": (T.absolute, [away_from(rng, (3, 4))]),
        "maximum": (T.maximum, [a, b]),
        "minimum": (T.minimum, [a, b]),
    }


def test_every_primitive_gradient_100_trials():
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        cases = {**_smooth_cases(rng), **_kink_cases(rng)}
        for name, (op, arrays) in cases.items():
            err = op_gradcheck(op, arrays, seed=trial)
            assert err < 1e-6, f"{name} trial {trial}: rel err {err}"
