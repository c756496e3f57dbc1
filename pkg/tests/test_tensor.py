"""Core tensor engine: forward values, backward rules, optimizer, oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attridet import tensor as T
from attridet.tensor import (
    GradientError,
    Parameter,
    SGD,
    ShapeError,
    Tensor,
    finite_difference_check,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestForwardValues:
    def test_matmul_ones(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((3, 2)))
        out = T.matmul(a, b)
        assert out.shape == (2, 2)
        assert np.all(out.data == 3.0)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_softmax_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(rng().standard_normal((5, 7)) * 3)
        out = T.softmax(x)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_l2_normalize_345(self):
        out = T.l2_normalize(Tensor([3.0, 4.0]))
        assert np.allclose(out.data, [0.6, 0.8])

    def test_l2_normalize_unit_norm(self):
        x = Tensor(rng(1).standard_normal((4, 6)))
        norms = np.linalg.norm(T.l2_normalize(x).data, axis=-1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    def test_layer_norm_against_direct_formula(self):
        # Independent mean/variance computation, kept apart from the op.
        x = np.array([1.0, 2.0, 3.0])
        mu = x.sum() / 3.0
        var = ((x - mu) ** 2).sum() / 3.0
        expected = (x - mu) / np.sqrt(var + 1e-5)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_concat_and_slice(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0, 4.0]])
        cat = T.concat([a, b], axis=0)
        assert cat.shape == (2, 2)
        assert np.allclose(cat[1:2, :].data, [[3.0, 4.0]])

    def test_concat_axis_out_of_range(self):
        with pytest.raises(T.AxisError, match="axis 2"):
            T.concat([Tensor(np.zeros((2, 2)))], axis=2)

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError, match="reshape"):
            T.reshape(Tensor(np.zeros((2, 3))), (4, 2))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tensor_sum(T.mul(x, x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_leaf_used_twice_accumulates(self):
        x = Tensor([1.0, -1.0, 0.5], requires_grad=True)
        T.tensor_sum(T.add(x, x)).backward()
        assert np.allclose(x.grad, 2.0)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(GradientError, match="scalar"):
            T.add(x, 1.0).backward()

    def test_matmul_matches_finite_differences(self):
        a = Tensor(rng(2).standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng(3).standard_normal((4, 2)), requires_grad=True)
        assert finite_difference_check(lambda t: T.tensor_sum(T.matmul(t, b)), a) < 1e-5
        assert finite_difference_check(lambda t: T.tensor_sum(T.matmul(a, t)), b) < 1e-5

    def test_no_graph_without_requires_grad(self):
        out = T.add(Tensor([1.0]), Tensor([2.0]))
        assert out._parents == () and not out.requires_grad

    def test_graph_recorded_with_requires_grad(self):
        out = T.add(Tensor([1.0], requires_grad=True), Tensor([2.0]))
        assert len(out._parents) == 2 and out.requires_grad

    def test_broadcast_add_unbroadcasts_grad(self):
        x = Tensor(np.zeros((3, 4)), requires_grad=True)
        bias = Tensor(np.zeros(4), requires_grad=True)
        T.tensor_sum(T.add(x, bias)).backward()
        assert np.allclose(bias.grad, 3.0)
        assert np.allclose(x.grad, 1.0)


# Every differentiable primitive, checked against central differences.
UNARY_OPS = [
    ("relu", T.relu, 0.3),  # offset keeps points away from the kink
    ("gelu", T.gelu, 0.0),
    ("sigmoid", T.sigmoid, 0.0),
    ("tanh", T.tanh, 0.0),
    ("exp", T.exp, 0.0),
    ("softmax", T.softmax, 0.0),
    ("log_softmax", T.log_softmax, 0.0),
    ("abs", T.absolute, 0.4),
    ("l2_normalize", T.l2_normalize, 0.0),
]


@pytest.mark.parametrize("name,op,offset", UNARY_OPS, ids=[u[0] for u in UNARY_OPS])
def test_unary_gradients(name, op, offset):
    x = Tensor(rng(7).standard_normal((3, 5)) + offset, requires_grad=True)
    assert finite_difference_check(lambda t: T.tensor_sum(op(t)), x) < 1e-4


def test_log_sqrt_power_gradients():
    x = Tensor(rng(8).random((3, 4)) + 0.5, requires_grad=True)
    assert finite_difference_check(lambda t: T.tensor_sum(T.log(t)), x) < 1e-4
    assert finite_difference_check(lambda t: T.tensor_sum(T.sqrt(t)), x) < 1e-4
    assert finite_difference_check(lambda t: T.tensor_sum(T.power(t, 3.0)), x) < 1e-4


def test_structural_gradients():
    x = Tensor(rng(9).standard_normal((2, 3, 4)), requires_grad=True)
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.mul(T.transpose(t, (2, 0, 1)), 2.0)), x) < 1e-6
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.power(T.reshape(t, (6, 4)), 2.0)), x) < 1e-4
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.power(t[:, 1:, ::2], 2.0)), x) < 1e-4
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.tensor_mean(t, axis=(0, 2))), x) < 1e-6


def test_div_and_layer_norm_gradients():
    x = Tensor(rng(10).standard_normal((3, 4)), requires_grad=True)
    d = Tensor(rng(11).random((3, 4)) + 0.5, requires_grad=True)
    assert finite_difference_check(lambda t: T.tensor_sum(T.div(t, d)), x) < 1e-4
    assert finite_difference_check(lambda t: T.tensor_sum(T.div(x, t)), d) < 1e-4
    scale = Tensor(rng(12).standard_normal(4), requires_grad=True)
    shift = Tensor(rng(13).standard_normal(4), requires_grad=True)
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.layer_norm(t, scale, shift)), x) < 1e-4
    assert finite_difference_check(
        lambda t: T.tensor_sum(T.layer_norm(x, t, shift)), scale) < 1e-4


class TestFiniteDifferenceCheck:
    def test_sigmoid_within_tolerance(self):
        x = Tensor(rng(4).standard_normal(6), requires_grad=True)
        assert finite_difference_check(lambda t: T.tensor_sum(T.sigmoid(t)), x) < 1e-5

    def test_linear_nearly_exact(self):
        x = Tensor(rng(5).standard_normal(5), requires_grad=True)
        assert finite_difference_check(lambda t: T.tensor_sum(t), x) < 1e-9

    def test_non_finite_reported(self):
        x = Tensor([700.0], requires_grad=True)
        with pytest.raises(GradientError, match="non-finite"):
            finite_difference_check(lambda t: T.tensor_sum(T.exp(T.mul(t, t))), x)


class TestSGD:
    def test_single_step(self):
        p = Parameter(np.array([1.0]), name="p")
        p.value.grad = np.array([1.0])
        SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
        assert np.allclose(p.data, 0.9)

    def test_frozen_untouched_even_with_grad(self):
        p = Parameter(np.array([1.0, 2.0]), trainable=False, name="frozen")
        p.value.grad = np.array([5.0, 5.0])
        before = p.data.copy()
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        for _ in range(3):
            opt.step()
        assert np.array_equal(p.data, before)

    def test_momentum_recurrence(self):
        # Hand-rolled recurrence: v <- m*v + g, p <- p - lr*v.
        p = Parameter(np.array([0.0]), name="p")
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        v, expect = 0.0, 0.0
        for step in range(2):
            p.value.grad = np.array([1.0])
            opt.step()
            v = 0.9 * v + 1.0
            expect -= 0.1 * v
            assert np.allclose(p.data, expect)
        assert np.allclose(p.data, -0.29)

    def test_missing_grad_names_parameter(self):
        p = Parameter(np.array([1.0]), name="heads.cls.weight")
        with pytest.raises(GradientError, match="heads.cls.weight"):
            SGD([p], lr=0.1).step()

    def test_weight_decay(self):
        p = Parameter(np.array([2.0]), name="p")
        p.value.grad = np.array([0.0])
        SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step()
        assert np.allclose(p.data, 2.0 - 0.5 * 0.1 * 2.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_softmax_rows_property(rows, cols, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((rows, cols)) * 5)
    out = T.softmax(x).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_l2_normalize_property(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((3, 4)) * (10.0 ** g.integers(-2, 3))
    if np.all(np.linalg.norm(x, axis=-1) >= 1e-3):
        norms = np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=-1)
        assert np.all((norms >= 1 - 1e-6) & (norms <= 1 + 1e-6))


def test_linear_op_scaling_in_repeated_use():
    # A leaf appearing k times in a linear graph gets k times the gradient.
    for k in (2, 3, 5):
        x = Tensor(np.ones(4), requires_grad=True)
        total = x
        for _ in range(k - 1):
            total = T.add(total, x)
        T.tensor_sum(total).backward()
        assert np.allclose(x.grad, float(k))
