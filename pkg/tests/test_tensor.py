import zlib

import numpy as np
import pytest

from crosstok_kd import tensor as T
from crosstok_kd.tensor import ContractError, ShapeError, Tensor
from helpers import check_gradients, rand_tensor


def weighted(out: Tensor, rng) -> Tensor:
    """Scalarise with fixed random weights so every output entry matters."""
    return T.sum_(T.mul(out, Tensor(rng.normal(size=out.shape))))


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_4x5_5x3():
    rng = np.random.default_rng(0)
    a, b = rand_tensor(rng, 4, 5), rand_tensor(rng, 5, 3)
    w = Tensor(rng.normal(size=(4, 3)))
    assert check_gradients(lambda: T.sum_(T.mul(T.matmul(a, b), w)), [a, b]) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    assert T.softmax_rows(Tensor([[5.0, 5.0]]), np.array([[True, False]])).data.tolist() == [[1.0, 0.0]]
    np.testing.assert_allclose(
        T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8
    )


def test_softmax_rows_sum_to_one_and_masked_entries_are_zero():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-50, 50, (40, 9)))
    mask = rng.random((40, 9)) < 0.6
    mask[:, 0] = True
    y = T.softmax_rows(x, mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-9


def test_softmax_degenerate_row_is_zero_and_flagged():
    y = T.softmax_rows(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, True], [False, False]]))
    assert y.data[1].tolist() == [0.0, 0.0]
    assert y.degenerate.tolist() == [False, True]


def test_std_normalize_examples():
    assert T.std_normalize_rows(Tensor([[2.0, -2.0]])).data.tolist() == [[1.0, -1.0]]
    # zero spread: the row keeps its shape and is only rescaled by the guard
    out = T.std_normalize_rows(Tensor([[5.0, 5.0, 5.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[5.0 / 1e-8] * 3])
    assert T.std_normalize_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.0, 0.0]]
    rng = np.random.default_rng(2)
    out = T.std_normalize_rows(Tensor(rng.normal(size=(3, 8)))).data
    assert np.max(np.abs(out.std(axis=1) - 1.0)) < 1e-9


def test_std_normalize_needs_two_columns():
    with pytest.raises(ContractError):
        T.std_normalize_rows(Tensor([[1.0], [2.0]]))


def test_backward_examples():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    T.sum_(x).backward()
    assert x.grad.tolist() == [[1.0] * 3] * 2
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_accumulates_on_leaves():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    T.sum_(T.mul(x, x)).backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_needs_scalar_and_a_trainable_input():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.scale(x, 2.0).backward()
    with pytest.raises(ContractError):
        T.sum_(Tensor(np.ones(3))).backward()


def test_unused_parameter_gets_zero_gradient():
    a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0, 4.0], requires_grad=True)
    loss = T.add(T.sum_(a), T.scale(T.sum_(b), 0.0))
    loss.backward()
    assert b.grad.tolist() == [0.0, 0.0]


def test_shared_subgraph_gradient():
    x = Tensor([0.5, -1.0], requires_grad=True)
    y = T.exp(x)
    T.sum_(T.mul(y, y)).backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data))


def test_no_broadcasting_except_bias():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert T.add(Tensor(np.ones((2, 3))), Tensor(np.arange(3.0))).shape == (2, 3)


def test_more_than_three_axes_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((1, 1, 1, 1)))


ELEMENTWISE = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "gelu": T.gelu,
    "leaky_relu": T.leaky_relu,
    "abs": T.abs_,
    "neg": lambda a: -a,
    "scale": lambda a: T.scale(a, -1.7),
    "clamp": lambda a: T.clamp(a, -1.0, 1.0),
    "log": lambda a: T.log(T.add(T.abs_(a), Tensor(np.full(a.shape, 0.5)))),
    "transpose": T.transpose,
    "reshape": lambda a: T.reshape(a, (a.shape[1], a.shape[0])),
    "slice": lambda a: T.slice_last(a, 1, 3),
    "softmax": T.softmax_rows,
    "softmax_masked": lambda a: T.softmax_rows(a, np.tri(*a.shape, dtype=bool)),
    "log_softmax": T.log_softmax_rows,
    "std_normalize": T.std_normalize_rows,
    "l2_normalize": T.l2_normalize_rows,
    "sum_last": T.sum_last,
    "mean": T.mean,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rand_tensor(rng, 3, 4)
    op = ELEMENTWISE[name]
    w = Tensor(rng.normal(size=op(x).shape))
    assert check_gradients(lambda: T.sum_(T.mul(op(x), w)), [x]) < 1e-4


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.add(T.abs_(b), Tensor(np.full(b.shape, 0.5)))),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "concat": lambda a, b: T.concat_last([a, b]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)
    out_shape = BINARY[name](a, b).shape
    w = Tensor(rng.normal(size=out_shape))
    assert check_gradients(lambda: T.sum_(T.mul(BINARY[name](a, b), w)), [a, b]) < 1e-4


def test_structured_op_gradients():
    rng = np.random.default_rng(7)
    x, w, b = rand_tensor(rng, 2, 3, 4), rand_tensor(rng, 4, 5), rand_tensor(rng, 5)
    assert check_gradients(lambda: weighted(T.affine(x, w, b), np.random.default_rng(0)), [x, w, b]) < 1e-4
    table = rand_tensor(rng, 6, 3)
    idx = np.array([[0, 5, 5], [2, 0, 1]])
    assert check_gradients(lambda: weighted(T.gather_rows(table, idx), np.random.default_rng(1)), [table]) < 1e-4
    logits = rand_tensor(rng, 2, 3, 5)
    pick = np.array([[0, 4, 2], [1, 1, 3]])
    assert check_gradients(lambda: weighted(T.pick_last(logits, pick), np.random.default_rng(2)), [logits]) < 1e-4
    g, beta = rand_tensor(rng, 4), rand_tensor(rng, 4)
    x2 = rand_tensor(rng, 3, 4)
    assert check_gradients(lambda: weighted(T.layer_norm(x2, g, beta), np.random.default_rng(3)), [x2, g, beta]) < 1e-4
    a3, b3 = rand_tensor(rng, 2, 3, 4), rand_tensor(rng, 2, 4, 2)
    assert check_gradients(lambda: weighted(T.matmul(a3, b3), np.random.default_rng(4)), [a3, b3]) < 1e-4


def test_clamp_gradient_is_zero_where_clipped():
    x = Tensor([-3.0, 0.0, 3.0], requires_grad=True)
    T.sum_(T.clamp(x, -1.0, 1.0)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_gradients_are_finite_after_backward_through_masked_softmax():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), requires_grad=True)
    mask = np.array([[True, False, True], [False, False, False]])
    T.sum_(T.mul(T.softmax_rows(x, mask), Tensor(np.arange(6.0).reshape(2, 3)))).backward()
    assert np.all(np.isfinite(x.grad))
    assert x.grad[1].tolist() == [0.0, 0.0, 0.0]
