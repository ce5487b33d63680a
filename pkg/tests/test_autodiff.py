import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bssdistill import autodiff as ad
from helpers import GRAD_CASES, objective_case


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        fn, leaf = GRAD_CASES[name](rng)
        rep = ad.finite_difference_check(fn, leaf)
        assert rep.passed, f"{name}: max relative error {rep.max_rel_error:.2e}"


def test_objective_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(5):
        fn, leaf = objective_case(rng)
        assert ad.finite_difference_check(fn, leaf).passed


def test_forward_examples():
    np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(ad.softmax(ad.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(ad.affine(x, np.eye(3), np.zeros(3)).data, x)


def test_square_derivative():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    assert ad.backward(x * x, [x])[x] == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient():
    z = ad.Tensor(np.random.default_rng(0).standard_normal((1, 6)), requires_grad=True)
    g = ad.backward(ad.sum_(ad.softmax(z)), [z])[z]
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    z = np.array([[1000.0, 0.0, -1000.0]])
    p = ad.softmax_np(z)
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)
    assert np.isfinite(ad.log_softmax_np(z)).all()


def test_input_tensor_is_a_leaf():
    w = np.array([[2.0, -1.0]])
    x = ad.Tensor(np.array([[0.5, 0.25]]), requires_grad=True)
    g = ad.backward(ad.sum_(ad.affine(x, w)), [x])[x]
    np.testing.assert_array_equal(g, w)


def test_gradient_accumulates_over_reuse():
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.sum_(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    np.testing.assert_allclose(ad.backward(y, [x])[x], 2 * x.data + 3)


def test_backward_rejects_non_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.scale(x, 2.0), [x])


def test_backward_rejects_foreign_leaf():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    other = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.sum_(x), [other])


def test_gradient_map_covers_each_leaf_once_with_leaf_shape():
    a = ad.Tensor(np.ones((2, 3)), requires_grad=True)
    b = ad.Tensor(np.ones(3), requires_grad=True)
    grads = ad.backward(ad.sum_(ad.add(a, b)), [a, b])
    assert len(grads) == 2
    assert grads[a].shape == a.shape and grads[b].shape == b.shape
    np.testing.assert_array_equal(grads[b], [2, 2, 2])


def test_shape_errors_name_the_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError, match="affine"):
        ad.affine(np.ones((2, 3)), np.ones((4, 2)))


def test_non_finite_values_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.Tensor([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor([0.0, 1.0]))


def test_constant_function_has_zero_gradient():
    rep = ad.finite_difference_check(lambda t: ad.Tensor(np.array(4.0)), np.ones(3))
    assert rep.passed
    np.testing.assert_array_equal(rep.analytic, 0.0)


def test_corrupted_rule_fails_check(monkeypatch):
    real = ad.tanh

    def broken(a):
        out = real(a)
        return ad._node(out.data, "tanh", (ad.as_tensor(a),), lambda g: (2.0 * g,))

    rep = ad.finite_difference_check(lambda t: ad.sum_(broken(t)), np.linspace(-1, 1, 5))
    assert not rep.passed and rep.max_rel_error > 1e-2


def test_finite_difference_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda t: ad.sum_(t), np.ones(2), step=0.0)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = ad.max_pool2d(ad.conv2d(x, w, padding=1)).data
    b = ad.max_pool2d(ad.conv2d(x, w, padding=1)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_backward_is_linear(x, a, b):
    t = ad.Tensor(x, requires_grad=True)
    f = lambda v: ad.sum_(ad.tanh(v))
    g = lambda v: ad.sum_(ad.mul(v, v))
    combo = ad.backward(ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), [t])[t]
    sep = a * ad.backward(f(t), [t])[t] + b * ad.backward(g(t), [t])[t]
    np.testing.assert_allclose(combo, sep, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)), st.floats(0.1, 10))
def test_softmax_rows_sum_to_one(z, temperature):
    p = ad.softmax_np(z / temperature)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all()
