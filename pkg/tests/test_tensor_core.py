"""Autodiff engine: graph construction, backward sweep, fan-out."""

import numpy as np
import pytest

from lipsynth.errors import ShapeError
from lipsynth.tensor import (
    Tensor, add, backward, matmul, mul, no_grad, sum_, trace, zero_grads,
)

rnd = np.random.default_rng(1234)


def test_sum_backward_is_all_ones():
    x = Tensor(rnd.standard_normal((3, 4)), requires_grad=True)
    backward(sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_fanout_accumulates():
    # loss = sum(x + x) -> grad(x) = all-twos
    x = Tensor(rnd.standard_normal(5), requires_grad=True)
    backward(sum_(add(x, x)))
    assert np.array_equal(x.grad, 2.0 * np.ones(5))


def test_shared_subexpression_equals_per_path_sum():
    x = Tensor(rnd.standard_normal((2, 2)), requires_grad=True)
    y = mul(x, x)           # y reused on two paths
    loss = sum_(add(y, mul(y, Tensor(3.0 * np.ones((2, 2))))))
    backward(loss)
    # d/dx [x^2 + 3x^2] = 8x
    assert np.allclose(x.grad, 8.0 * x.data, rtol=0, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(rnd.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(add(x, x))


def test_trace_topological_order_and_single_visit():
    x = Tensor(rnd.standard_normal((2, 3)), requires_grad=True)
    w = Tensor(rnd.standard_normal((3, 2)), requires_grad=True)
    y = matmul(x, w)
    z = add(y, y)
    loss = sum_(z)
    order = trace(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    assert len(pos) == len(order)          # each node appears exactly once
    for node in order:
        for parent in node.parents:
            assert pos[id(parent)] < pos[id(node)]


def test_leaf_grads_populated_after_backward():
    x = Tensor(rnd.standard_normal((4,)), requires_grad=True)
    w = Tensor(rnd.standard_normal((4,)), requires_grad=True)
    backward(sum_(mul(x, w)))
    assert x.grad is not None and x.grad.shape == x.shape
    assert w.grad is not None and w.grad.shape == w.shape
    zero_grads([x, w])
    assert x.grad is None


def test_no_grad_builds_no_graph():
    x = Tensor(rnd.standard_normal((2, 2)), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert y.backward_fn is None and y.parents == ()
    assert not y.requires_grad


def test_grad_shape_matches_data_shape():
    x = Tensor(rnd.standard_normal((3, 2, 4)), requires_grad=True)
    backward(sum_(mul(x, x)))
    assert x.grad.shape == x.data.shape
