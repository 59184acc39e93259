"""Autodiff substrate: forward contracts, gradient oracles, invariants."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protocaps import tensor as T
from protocaps.tensor import Tensor

from conftest import check_grads, finite_diff_grads, max_rel_err


def t64(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(t64([[1, 0], [0, 1]]), t64([[3, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_forced():
    out = T.matmul(t64([[1, 2]]), t64([[3], [4]]))
    assert np.array_equal(out.data, [[11]])


def test_matmul_gradients_vs_finite_differences(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    check_grads(lambda: T.reduce_sum(T.matmul(a, b) * w), [a, b], rtol=1e-6)


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_batched_leading_dims(rng):
    a = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    out = T.matmul(a, b)
    assert out.shape == (5, 3, 2)
    expected = np.einsum("bij,jk->bik", a.data, b.data)
    assert np.allclose(out.data, expected, atol=1e-12)
    check_grads(lambda: T.reduce_sum(T.matmul(a, b) * T.matmul(a, b)),
                [a, b], rtol=1e-6)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_add_trivial():
    assert np.array_equal(T.elementwise("add", t64([1, 2]),
                                        t64([3, 4])).data, [4, 6])


def test_mul_by_zero_zeroes_value_and_gradient():
    x = t64([1.0, -2.0, 3.0], grad=True)
    z = t64([0.0, 0.0, 0.0])
    out = T.elementwise("mul", x, z)
    assert np.array_equal(out.data, [0, 0, 0])
    T.backward(T.reduce_sum(out))
    assert np.array_equal(x.grad, [0, 0, 0])


def test_broadcast_add_gradient(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4,)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 4)))
    check_grads(lambda: T.reduce_sum((a + b) * w), [a, b], rtol=1e-6)


def test_non_broadcastable_rejected():
    with pytest.raises(T.ShapeError):
        T.elementwise("add", t64(np.ones((2, 3))), t64(np.ones((2, 2))))


def test_mixed_dtypes_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(T.ShapeError, match="dtype"):
        T.elementwise("add", a, b)


@given(st.integers(1, 4), st.integers(1, 4))
def test_broadcast_mul_matches_numpy(m, n):
    rng = np.random.default_rng(m * 7 + n)
    a = rng.normal(size=(m, n))
    b = rng.normal(size=(n,))
    out = T.elementwise("mul", t64(a), t64(b))
    assert np.allclose(out.data, a * b, atol=0)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def test_sum_axis0():
    assert np.array_equal(T.reduce(
        "sum", t64([[1, 2], [3, 4]]), 0).data, [4, 6])


def test_mean_of_constant():
    assert T.reduce("mean", t64(np.full((3, 5), 2.5)), None).item() == 2.5


def test_sum_gradient_is_ones():
    x = t64(np.arange(12.0).reshape(3, 4), grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_mean_gradient_distributes():
    x = t64(np.ones((2, 5)), grad=True)
    T.backward(T.reduce_mean(x))
    assert np.allclose(x.grad, np.full((2, 5), 0.1), atol=1e-15)


def test_max_routes_gradient_to_first_argmax():
    x = t64([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], grad=True)
    T.backward(T.reduce_sum(T.reduce_max(x, axis=1)))
    assert np.array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_invalid_axis_rejected():
    with pytest.raises(T.ShapeError):
        T.reduce("sum", t64(np.ones((2, 2))), 5)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert T.activation("sigmoid", t64(0.0)).item() == 0.5


def test_relu_values():
    out = T.activation("relu", t64([-3.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_sigmoid_saturation_matches_high_precision():
    # no overflow warnings, finite everywhere, mpmath as the oracle
    with np.errstate(all="raise"):
        out = T.sigmoid(t64([50.0, -50.0]))
    assert np.all(np.isfinite(out.data))
    mpmath.mp.dps = 50
    exact = [float(1 / (1 + mpmath.exp(-50))),
             float(1 / (1 + mpmath.exp(50)))]
    assert abs(out.data[0] - exact[0]) < 1e-16
    assert abs(out.data[1] - exact[1]) < 1e-16
    assert abs(out.data[0] - 1.0) <= 1e-15
    assert abs(out.data[1] - 0.0) <= 1e-15


def test_relu_subgradient_zero_at_zero():
    x = t64([0.0, 1.0], grad=True)
    T.backward(T.reduce_sum(T.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_sigmoid_gradient(rng):
    x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    check_grads(lambda: T.reduce_sum(T.sigmoid(x)), [x], rtol=1e-6)


# ---------------------------------------------------------------------------
# softmax_rows
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    assert np.allclose(T.softmax_rows(t64([[0.0, 0.0]])).data, [[0.5, 0.5]],
                       atol=1e-15)


def test_softmax_extreme_row_is_finite():
    out = T.softmax_rows(t64([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] > 1 - 1e-12 and out.data[0, 1] < 1e-12


def test_softmax_rows_sum_and_gradient(rng):
    x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    out = T.softmax_rows(x)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    w = Tensor(rng.uniform(-1, 1, (4, 3)))
    check_grads(lambda: T.reduce_sum(T.softmax_rows(x) * w), [x], rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1,
                         max_size=6), min_size=1, max_size=6))
def test_softmax_rows_always_stochastic(rows):
    width = len(rows[0])
    rows = [r[:width] + [0.0] * (width - len(r)) for r in rows]
    out = T.softmax_rows(t64(rows))
    assert np.all(out.data >= 0)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_loops(x, k, stride, padding):
    """Direct 6-loop convolution oracle."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[co, ci, u, v] * \
                                xp[ci, i * stride + u, j * stride + v]
                out[co, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = t64(np.arange(9.0).reshape(1, 3, 3))
    k = t64(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv_forced_arithmetic():
    x = t64(np.ones((1, 4, 4)))
    k = t64(np.ones((1, 1, 2, 2)))
    out = T.conv2d(x, k, stride=2, padding=0)
    assert np.array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv_against_loop_oracle(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 5, 5)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        out = T.conv2d(x, k, stride, padding)
        expected = conv2d_loops(x.data, k.data, stride, padding)
        assert np.max(np.abs(out.data - expected)) <= 1e-10

    w = Tensor(rng.uniform(-1, 1, (3, 5, 5)))

    def loss():
        return T.reduce_sum(T.conv2d(x, k, 1, 1) * w)

    loss_t = loss()
    T.backward(loss_t)
    gx, gk = x.grad.copy(), k.grad.copy()
    x.grad = k.grad = None
    ngx, ngk = finite_diff_grads(lambda: loss().item(), [x, k])
    assert max_rel_err(gx, ngx) <= 1e-6
    assert max_rel_err(gk, ngk) <= 1e-6


def test_conv_nhwc_matches_nchw(rng):
    x = rng.uniform(-1, 1, (2, 3, 6, 7))
    k = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)))
    a = T.conv2d(Tensor(x), k, 2, 1)
    b = T.conv2d(Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1))), k,
                 2, 1, layout="nhwc")
    assert np.allclose(a.data, b.data.transpose(0, 3, 1, 2), atol=1e-12)


def test_conv_nhwc_gradients(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 5, 5, 2)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3, 3)))
    check_grads(
        lambda: T.reduce_sum(T.conv2d(x, k, 2, 1, layout="nhwc") * w),
        [x, k], rtol=1e-7)


def test_conv_kernel_larger_than_input_rejected():
    with pytest.raises(T.ShapeError):
        T.conv2d(t64(np.ones((1, 3, 3))), t64(np.ones((1, 1, 5, 5))),
                 1, 0)


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t64(np.ones((2, 3)), grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = t64([1.0, -2.0, 0.5], grad=True)
    T.backward(T.reduce_sum(x * x))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-15)


def test_second_backward_rejected():
    x = t64([1.0], grad=True)
    loss = T.reduce_sum(x * x)
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_non_scalar_rejected():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(T.GraphError):
        T.backward(x * x)


def test_backward_detached_rejected():
    x = t64([1.0], grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.reduce_sum(x.detach()))
    with T.no_grad():
        loss = T.reduce_sum(x * x)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_fanout_accumulation_matches_duplicated_inputs(rng):
    data = rng.normal(size=(3, 3))
    x = Tensor(data.copy(), requires_grad=True)
    T.backward(T.reduce_sum(T.matmul(x, x)))
    # duplicated-input formulation: d/dA sum(A@B) + d/dB sum(A@B) at A=B=x
    a = Tensor(data.copy(), requires_grad=True)
    b = Tensor(data.copy(), requires_grad=True)
    T.backward(T.reduce_sum(T.matmul(a, b)))
    assert np.allclose(x.grad, a.grad + b.grad, atol=1e-12)


def test_grad_accumulates_across_graphs():
    x = t64([1.0, 2.0], grad=True)
    T.backward(T.reduce_sum(x * x))
    first = x.grad.copy()
    T.backward(T.reduce_sum(x * x))
    assert np.array_equal(x.grad, 2 * first)


def test_determinism_bit_identical(rng):
    def run(seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(8, 8)), requires_grad=True)
        w = Tensor(r.normal(size=(8, 8)), requires_grad=True)
        loss = T.reduce_sum(T.softmax_rows(T.matmul(x, w)) *
                            T.sigmoid(T.matmul(w, x)))
        T.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run(123)
    l2, gx2, gw2 = run(123)
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def test_permute_rows_roundtrip_gradient(rng):
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    order = np.array([4, 2, 0, 1, 3])
    out = T.permute_rows(x, order)
    assert np.array_equal(out.data, x.data[order])
    w = Tensor(rng.normal(size=(5, 3)))
    check_grads(lambda: T.reduce_sum(T.permute_rows(x, order) * w), [x],
                rtol=1e-7)


def test_select_labels():
    logits = t64([[1.0, 2.0], [3.0, 4.0]], grad=True)
    out = T.select_labels(logits, [1, 0])
    assert np.array_equal(out.data, [2.0, 3.0])
    T.backward(T.reduce_sum(out))
    assert np.array_equal(logits.grad, [[0, 1], [1, 0]])
    with pytest.raises(IndexError):
        T.select_labels(logits, [0, 2])


def test_pad_and_subsample_gradients(rng):
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4, 4)))
    check_grads(lambda: T.reduce_sum(T.pad_axis(x, 0, 1, 1) * w), [x],
                rtol=1e-7)
    w2 = Tensor(rng.normal(size=(2, 2, 2)))
    check_grads(lambda: T.reduce_sum(T.subsample_hw(x, 2) * w2), [x],
                rtol=1e-7)


def test_audit_counts_multiplies(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 5)))
    with T.audit_ops() as audit:
        T.matmul(a, b)
        T.sigmoid(a)
        T.softmax_rows(a)
    assert audit.muls == 3 * 4 * 5
    assert audit.count("softmax_rows") == 1
    assert audit.allocation_sizes() >= {15, 12}
