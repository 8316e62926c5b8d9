import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftlab import autodiff as ad
from driftlab.autodiff import Graph, ShapeError, Tensor
from helpers import conditioned_expressions


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- forward values ------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(2))).value, a)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).value, [0.5, 0.5])


def test_softmax_is_stable_for_large_logits():
    out = ad.softmax(Tensor([1000.0, 1000.0, -1000.0])).value
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_norm_of_three_four():
    assert ad.norm(Tensor([3.0, 4.0])).item() == 5.0


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shape mismatch \(2, 3\) vs \(3, 2\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_leading_dimension_broadcast_only():
    out = Tensor(np.ones((4, 3))) + Tensor(np.arange(3.0))
    assert out.shape == (4, 3)
    with pytest.raises(ShapeError):
        Tensor(np.ones((4, 3))) * Tensor(np.ones((4, 1)))


def test_explicit_broadcast_reduces_gradient():
    x = leaf(np.ones((4, 1)))
    ad.backward(ad.sum_(ad.broadcast(x, (4, 3))))
    np.testing.assert_array_equal(x.grad, np.full((4, 1), 3.0))


def test_gather_rows_accumulates_repeated_indices():
    table = leaf(np.arange(6.0).reshape(3, 2))
    ad.backward(ad.sum_(ad.gather_rows(table, np.array([0, 2, 0]))))
    np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_slice_and_concat_roundtrip():
    x = leaf(np.arange(6.0).reshape(2, 3))
    y = ad.concat([x[:, :1], x[:, 1:]], axis=1)
    np.testing.assert_array_equal(y.value, x.value)
    ad.backward(ad.sum_(y * y))
    np.testing.assert_array_equal(x.grad, 2 * x.value)


# -- stop-gradient ---------------------------------------------------------------

def test_stop_gradient_cancels_value_and_gradient():
    x = leaf(2.0)
    d = x - ad.stop_gradient(x)
    loss = d * d
    ad.backward(loss)
    assert loss.item() == 0.0
    assert x.grad == 0.0


def test_stop_gradient_blocks_one_factor():
    x = leaf(3.0)
    ad.backward(x * ad.stop_gradient(x))
    assert x.grad == 3.0


def test_stop_gradient_copies_values_bitwise():
    s = ad.softmax(Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(ad.stop_gradient(s).value, s.value)


def test_loss_only_through_stop_gradient_gives_zero_grads():
    x = leaf([1.0, -2.0])
    grads = ad.backward(ad.sum_(ad.stop_gradient(ad.tanh(x))))
    np.testing.assert_array_equal(grads.get(x, np.zeros(2)), np.zeros(2))


# -- backward ---------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 4))

    def run():
        x = leaf(w)
        ad.backward(ad.sum_(ad.tanh(x @ x.T) * ad.softmax(x @ x.T, axis=1)))
        return x.grad

    np.testing.assert_array_equal(run(), run())


def test_graph_is_in_insertion_order():
    x = leaf([1.0, 2.0])
    y = ad.exp(x)
    z = ad.sum_(y * x)
    ids = [n.output for n in Graph.trace(z).nodes]
    assert ids == sorted(ids)
    assert ids[-1] == z.node_id


def test_norm_gradient_at_zero_is_zero():
    x = leaf(np.zeros(3))
    ad.backward(ad.norm(x))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1, w2, w3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=(5, 1))

    def f(x):
        h = ad.tanh(x @ Tensor(w1))
        h = ad.tanh(h @ Tensor(w2))
        return ad.sum_(h @ Tensor(w3))

    assert ad.finite_difference_check(f, rng.normal(size=(3, 4))) <= 1e-6


# -- finite-difference oracle --------------------------------------------------------

def test_fd_check_sum_of_squares_is_tight():
    x = np.random.default_rng(2).normal(size=7)
    assert ad.finite_difference_check(lambda t: ad.sum_(t * t), x) <= 1e-8


def test_fd_check_constant_is_zero():
    assert ad.finite_difference_check(lambda t: ad.sum_(Tensor(np.ones(3))) + 0.0 * ad.sum_(t), np.ones(3)) == 0.0


def test_fd_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda t: ad.sum_(t), np.ones(2), h=0.0)


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(t * t + 1.0),
    "tanh": ad.tanh,
    "sqrt": lambda t: ad.sqrt(t * t + 0.5),
    "softmax0": lambda t: ad.softmax(t, axis=0),
    "softmax1": lambda t: ad.softmax(t, axis=1),
    "log_softmax": lambda t: ad.log_softmax(t, axis=1),
    "norm": lambda t: ad.norm(t, axis=1),
    "squared_norm": lambda t: ad.squared_norm(t, axis=0),
    "mean": lambda t: ad.mean(t, axis=0),
    "transpose": lambda t: t.T @ t,
    "div": lambda t: t / (t * t + 1.0),
    "relu": lambda t: ad.relu(t),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients(name):
    x = np.random.default_rng(3).uniform(0.3, 1.5, size=(3, 4)) * np.array([1, -1, 1, -1])
    weights = np.random.default_rng(4).normal(size=UNARY[name](Tensor(x)).shape)
    assert ad.finite_difference_check(lambda t: ad.sum_(UNARY[name](t) * weights), x) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_expression_gradients(seed):
    ((f, x),) = conditioned_expressions(seed, 1)
    assert ad.finite_difference_check(f, x) <= 1e-5
