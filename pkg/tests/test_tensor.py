import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdml import tensor as T
from cdml.tensor import DimensionError, Tensor, grad_check, numeric_gradient, relative_error


def rng(seed=0):
    return np.random.default_rng(seed)


def away_from_zero(r, shape, gap=0.1):
    x = r.uniform(-1, 1, shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


# --- matmul -----------------------------------------------------------------


def test_identity_matmul():
    v = Tensor(np.array([[3.5], [-2.0]]))
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), v).data, v.data)


def test_matmul_hand_value():
    out = T.matmul(Tensor(np.array([[2.0, 0.0], [0.0, 1.0]])), Tensor(np.array([[1.0], [1.0]])))
    assert np.array_equal(out.data, [[2.0], [1.0]])


def test_matmul_grad_both_operands():
    r = rng(1)
    a, b = Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=(3, 2)))
    assert grad_check(lambda x: T.total(T.matmul(x, b)), a) <= 1e-6
    assert grad_check(lambda x: T.total(T.matmul(a, x)), b) <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(4, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((4, 3))), Tensor(np.ones((2, 2))))


# --- conv -------------------------------------------------------------------


def test_conv_all_ones_is_nine():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_one_hot_filter_is_identity():
    x = rng(2).normal(size=(2, 5, 7))
    f = np.zeros((1, 2, 1, 1))
    f[0, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(f))
    assert np.array_equal(out.data[0], x[1])


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 4, 4))))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))


def test_conv_matches_direct_loops():
    r = rng(3)
    x, f, b = r.normal(size=(2, 7, 6)), r.normal(size=(3, 2, 3, 2)), r.normal(size=3)
    stride = 2
    out = T.conv2d(Tensor(x), Tensor(f), stride=stride, bias=Tensor(b)).data
    ho, wo = (7 - 3) // 2 + 1, (6 - 2) // 2 + 1
    ref = np.zeros((3, ho, wo))
    for k in range(3):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride:i * stride + 3, j * stride:j * stride + 2]
                ref[k, i, j] = np.sum(patch * f[k]) + b[k]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv_gradients():
    r = rng(4)
    x, f, b = Tensor(r.normal(size=(2, 6, 6))), Tensor(r.normal(size=(2, 2, 3, 3))), Tensor(r.normal(size=2))
    assert grad_check(lambda t: T.total(T.conv2d(t, f, bias=b)), x) <= 1e-5
    assert grad_check(lambda t: T.total(T.conv2d(x, t, bias=b)), f) <= 1e-5
    assert grad_check(lambda t: T.total(T.conv2d(x, f, bias=t)), b) <= 1e-5


def test_conv_batched_strided_gradient():
    r = rng(5)
    x = Tensor(r.normal(size=(2, 3, 8, 8)))
    f = Tensor(r.normal(size=(4, 3, 2, 2)))
    w = r.normal(size=(2, 4, 4, 4))  # random projection so gradients are not uniform
    assert grad_check(lambda t: T.total(T.dot(T.conv2d(t, f, stride=2), w)), x) <= 1e-5


# --- pooling ----------------------------------------------------------------


def test_pool_hand_value():
    out = T.maxpool2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
    assert out.data.item() == 4.0


def test_pool_constant_routes_gradient_to_first_position():
    x = Tensor(np.full((1, 2, 2), 5.0), requires_grad=True)
    out = T.maxpool2(x)
    assert out.data.item() == 5.0
    T.total(out).backward()
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_pool_odd_extent():
    with pytest.raises(DimensionError):
        T.maxpool2(Tensor(np.ones((1, 3, 4))))


def test_pool_gradient_distinct_entries():
    x = Tensor(rng(6).permutation(16).reshape(1, 4, 4) / 7.0)
    w = rng(7).normal(size=(1, 2, 2))
    assert grad_check(lambda t: T.total(T.dot(T.maxpool2(t), w)), x) <= 1e-6


# --- relu and others --------------------------------------------------------


def test_relu_values():
    assert np.array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0])
    assert np.array_equal(T.relu(Tensor(x)).data, x)


def test_relu_gradient():
    x = Tensor(away_from_zero(rng(8), (5, 4)))
    assert grad_check(lambda t: T.total(T.relu(t)), x) <= 1e-6


def test_relu_subgradient_zero_at_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    T.total(T.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_accumulation_over_two_consumers():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = T.add(T.scale(x, 2.0), T.relu(x))
    T.total(y).backward()
    assert np.array_equal(x.grad, [3.0, 2.0, 3.0])


def test_row_norms_and_normalize_gradients():
    r = rng(9)
    x = Tensor(r.normal(size=(3, 5)))
    w = r.normal(size=(3, 5))
    assert grad_check(lambda t: T.total(T.row_norms(t)), x) <= 1e-6
    assert grad_check(lambda t: T.total(T.dot(T.l2_normalize(t), w)), x) <= 1e-6


def test_row_norm_zero_row_has_zero_subgradient():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    T.total(T.row_norms(x)).backward()
    assert np.array_equal(x.grad, np.zeros((1, 3)))


def test_l2_normalize_zero_raises_callback_error():
    class Boom(Exception):
        pass

    with pytest.raises(Boom):
        T.l2_normalize(Tensor(np.zeros((2, 3))), on_zero=lambda rows: Boom(rows))


def test_softmax_cross_entropy_uniform_and_gradient():
    labels = np.array([0, 2, 1])
    out = T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), labels)
    assert out.data.item() == pytest.approx(np.log(4))
    x = Tensor(rng(10).normal(size=(3, 4)))
    assert grad_check(lambda t: T.softmax_cross_entropy(t, labels), x) <= 1e-6


def test_structural_ops_gradients():
    r = rng(11)
    x = Tensor(r.normal(size=(4, 6)))
    w = r.normal(size=(2, 6))
    assert grad_check(lambda t: T.total(T.dot(T.rows(t, 1, 3, axis=0), w)), x) <= 1e-6
    assert grad_check(lambda t: T.total(T.dot(T.take(t, np.array([3, 3])), w)), x) <= 1e-6
    y = Tensor(r.normal(size=(4, 2)))
    w2 = r.normal(size=(4, 8))
    assert grad_check(lambda t: T.total(T.dot(T.concat([t, y], axis=1), w2)), x) <= 1e-6
    assert grad_check(lambda t: T.mean(T.reshape(t, (24,))), x) <= 1e-6


def test_no_grad_builds_no_graph():
    p = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.add(p, p)
    assert not out.requires_grad


def test_forward_purity():
    r = rng(12)
    x, f = r.normal(size=(2, 6, 6)), r.normal(size=(3, 2, 3, 3))
    a = T.maxpool2(T.relu(T.conv2d(Tensor(x), Tensor(f)))).data
    b = T.maxpool2(T.relu(T.conv2d(Tensor(x), Tensor(f)))).data
    assert a.tobytes() == b.tobytes()


# --- the checker itself -----------------------------------------------------


def test_checker_exact_on_linear_op():
    w = rng(13).normal(size=(3, 4))
    x = Tensor(rng(14).normal(size=(3, 4)))
    # central differences are exact for linear maps at any step; a large step
    # keeps float rounding (about 1e-16 / eps) out of the comparison
    assert grad_check(lambda t: T.total(T.dot(t, w)), x, eps=1e-2) <= 1e-9


def test_checker_on_conv_relu_sum():
    r = rng(15)
    x = Tensor(r.normal(size=(2, 6, 6)))
    f = Tensor(r.normal(size=(2, 2, 3, 3)))
    assert grad_check(lambda t: T.total(T.relu(T.conv2d(t, f))), x, eps=1e-4) <= 1e-5


def test_checker_detects_corruption():
    r = rng(16)
    x = Tensor(r.normal(size=(2, 6, 6)))
    f = Tensor(r.normal(size=(2, 2, 3, 3)))
    assert grad_check(lambda t: T.total(T.relu(T.conv2d(t, f))), x, eps=1e-4, corrupt=1.01) >= 5e-3


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.1, 0.0])) == pytest.approx(0.1 / 1.1)


def test_numeric_gradient_restores_input():
    x = Tensor(np.array([1.0, 2.0]))
    before = x.data.copy()
    numeric_gradient(lambda t: T.total(T.relu(t)), x)
    assert np.array_equal(x.data, before)


# --- properties -------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_property_conv_relu_pool_gradient(seed):
    r = rng(seed)
    x = Tensor(r.normal(size=(2, 6, 6)))
    f = Tensor(r.normal(size=(2, 2, 3, 3)))
    b = Tensor(r.normal(size=2))
    w = r.normal(size=(2, 2, 2))
    loss = lambda t: T.total(T.dot(T.maxpool2(T.relu(T.conv2d(t, f, bias=b))), w))  # noqa: E731
    assert grad_check(loss, x) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 5),
    k=st.integers(1, 5),
    m=st.integers(1, 5),
    seed=st.integers(0, 10_000),
)
def test_property_matmul_shapes_and_finiteness(n, k, m, seed):
    r = rng(seed)
    a = Tensor(r.normal(size=(n, k)), requires_grad=True)
    b = Tensor(r.normal(size=(k, m)), requires_grad=True)
    out = T.matmul(a, b)
    T.total(out).backward()
    assert out.shape == (n, m)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()
