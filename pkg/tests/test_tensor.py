import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointvit import tensor as T
from jointvit.gradcheck import finite_diff_check
from jointvit.tensor import DimensionError, Tape, TapeError, Tensor


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = T.matmul(f64([[1, 0], [0, 1]]), f64([[5, 6], [7, 8]]))
    npt.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_values_match_triple_loop():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    expected = naive_matmul(a, b)
    npt.assert_array_equal(expected, [[19, 22], [43, 50]])
    npt.assert_array_equal(T.matmul(f64(a), f64(b)).data, expected)


def test_matmul_random_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    npt.assert_allclose(T.matmul(f64(a), f64(b)).data, naive_matmul(a, b), rtol=1e-12)


def test_matmul_batched_shape():
    out = T.matmul(f64(np.ones((2, 3, 4))), f64(np.ones((2, 4, 5))))
    assert out.shape == (2, 3, 5)


def test_matmul_broadcasts_batch():
    out = T.matmul(f64(np.ones((2, 3, 4))), f64(np.ones((4, 5))))
    assert out.shape == (2, 3, 5)


def test_matmul_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(f64(np.ones((2, 3))), f64(np.ones((4, 5))))


# ---------------------------------------------------------------------------
# layer norm / softmax / elementwise


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(f64([5, 5, 5, 5]), f64(np.ones(4)), f64(np.zeros(4)), 1e-5)
    npt.assert_array_equal(out.data, [0, 0, 0, 0])


def test_layer_norm_hand_value():
    out = T.layer_norm(f64([1, 3]), f64([1, 1]), f64([0, 0]), 0.0)
    npt.assert_allclose(out.data, [-1, 1], rtol=0, atol=1e-15)


def test_layer_norm_zero_gain_returns_beta():
    rng = np.random.default_rng(1)
    beta = rng.normal(size=6)
    out = T.layer_norm(f64(rng.normal(size=(3, 6))), f64(np.zeros(6)), f64(beta))
    npt.assert_array_equal(out.data, np.broadcast_to(beta, (3, 6)))


def test_layer_norm_dim_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(f64(np.ones((2, 4))), f64(np.ones(3)), f64(np.zeros(3)))


def test_softmax_examples():
    npt.assert_allclose(T.softmax(f64([0, 0, 0, 0])).data, [0.25] * 4, rtol=1e-15)
    npt.assert_allclose(T.softmax(f64([math.log(1), math.log(3)])).data, [0.25, 0.75], rtol=1e-14)
    out = T.softmax(f64([1000, 1000])).data
    assert np.all(np.isfinite(out))
    npt.assert_array_equal(out, [0.5, 0.5])


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 1000))
def test_softmax_sums_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    s64 = T.softmax(Tensor(x, "f64"), axis=-1).data
    assert np.all(s64 > 0)
    npt.assert_allclose(s64.sum(-1), 1.0, rtol=0, atol=1e-12)
    s32 = T.softmax(Tensor(x, "f32"), axis=0).data
    npt.assert_allclose(s32.sum(0), 1.0, rtol=0, atol=1e-5)


def test_softmax_axis_out_of_range():
    with pytest.raises(IndexError):
        T.softmax(f64(np.ones((2, 2))), axis=2)


def test_mean_axis_hand_value():
    npt.assert_array_equal(T.mean_axis(f64([[1, 2], [3, 4]]), 0).data, [2, 3])


def test_reshape_preserves_row_major_order():
    x = np.arange(2 * 4 * 3 * 8 * 8, dtype=np.float64).reshape(2, 4, 3, 8, 8)
    y = T.reshape(Tensor(x), (8, 3, 8, 8))
    npt.assert_array_equal(y.data.ravel(), x.ravel())
    npt.assert_array_equal(y.data[5], x[1, 1])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_reshape_round_trip(shape):
    x = np.random.default_rng(len(shape)).normal(size=shape)
    flat = T.reshape(Tensor(x), (-1,))
    back = T.reshape(flat, shape)
    npt.assert_array_equal(back.data, x)


def test_gelu_zero_and_odd_part():
    npt.assert_array_equal(T.gelu(f64([0.0])).data, [0.0])
    # gelu(x) - gelu(-x) == x for the tanh form
    x = np.linspace(-3, 3, 13)
    npt.assert_allclose(T.gelu(f64(x)).data - T.gelu(f64(-x)).data, x, atol=1e-15)


def test_slice_out_of_range():
    x = f64(np.ones((3, 4)))
    with pytest.raises(IndexError):
        T.slice_(x, (slice(0, 5),))
    with pytest.raises(IndexError):
        x[3]


def test_tensors_are_row_major_contiguous():
    x = T.permute(f64(np.arange(24.0).reshape(2, 3, 4)), (2, 0, 1))
    assert x.data.flags.c_contiguous
    assert x.size == math.prod(x.shape)


def test_dtype_guard():
    with pytest.raises(ValueError):
        Tensor([1, 2], dtype=np.int32)
    assert Tensor([1.0], "f64").dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


# ---------------------------------------------------------------------------
# backward


def test_backward_square():
    tape = Tape()
    x = tape.watch(f64([1, -2, 3]), "x")
    grads = tape.backward(T.sum_(T.mul(x, x)))
    npt.assert_array_equal(grads["x"].data, [2, -4, 6])


def test_backward_matmul_matches_central_differences():
    rng = np.random.default_rng(2)
    params = {"a": f64(rng.normal(size=(3, 4))), "b": f64(rng.normal(size=(4, 2)))}
    err = finite_diff_check(lambda p: T.sum_(T.matmul(p["a"], p["b"])), params, 1e-5)
    assert err < 1e-6


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.watch(f64([1.0, 2.0]), "x")
    tape.watch(f64(np.ones((2, 2))), "unused")
    grads = tape.backward(T.sum_(x))
    npt.assert_array_equal(grads["unused"].data, np.zeros((2, 2)))


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.watch(f64([3.0]), "x")
    y = T.add(T.mul(x, x), T.scale(x, 4.0))  # x^2 + 4x
    grads = tape.backward(T.sum_(y))
    npt.assert_allclose(grads["x"].data, [10.0])


def test_non_scalar_loss_rejected():
    tape = Tape()
    x = tape.watch(f64([1.0, 2.0]), "x")
    with pytest.raises(TapeError):
        tape.backward(T.mul(x, x))


def test_mixed_tapes_rejected():
    a = Tape().watch(f64([1.0]))
    b = Tape().watch(f64([1.0]))
    with pytest.raises(TapeError):
        T.add(a, b)


def test_untracked_ops_do_not_record():
    assert not T.add(f64([1.0]), f64([2.0])).tracked


def test_parents_precede_children():
    tape = Tape()
    x = tape.watch(f64(np.ones((2, 3))), "x")
    T.sum_(T.softmax(T.mul(x, x)))
    for i, node in enumerate(tape.nodes):
        assert all(p is None or p < i for p in node.parents)


def test_backward_gradient_shapes_match_values():
    tape = Tape()
    rng = np.random.default_rng(3)
    x = tape.watch(f64(rng.normal(size=(2, 3, 4))), "x")
    w = tape.watch(f64(rng.normal(size=(4, 5))), "w")
    h = T.gelu(T.matmul(x, w))
    loss = T.sum_(T.mean_axis(h, 1))
    tape.backward(loss)
    for nid, node in enumerate(tape.nodes):
        assert tape.grad_of(nid).shape == node.shape


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
@settings(max_examples=25, deadline=None)
def test_backward_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))

    def grads(fn):
        tape = Tape()
        x = tape.watch(f64(x0), "x")
        return tape.backward(fn(x))["x"].data

    l1 = lambda x: T.sum_(T.gelu(x))
    l2 = lambda x: T.sum_(T.softmax(x, -1) * T.scale(x, 2.0))
    combo = grads(lambda x: T.add(T.scale(l1(x), alpha), T.scale(l2(x), beta)))
    npt.assert_allclose(combo, alpha * grads(l1) + beta * grads(l2), rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# finite_diff_check contract


def test_fd_check_quadratic():
    rng = np.random.default_rng(4)
    A = f64(rng.normal(size=(3, 3)))
    p = {"x": f64(rng.normal(size=(3, 1)))}
    quad = lambda q: T.sum_(T.mul(q["x"], T.matmul(A, q["x"])))
    assert finite_diff_check(quad, p, 1e-5) < 1e-8


def test_fd_check_constant():
    p = {"x": f64([1.0, 2.0])}
    # zero times the input: a constant that is still attached to the tape
    assert finite_diff_check(lambda q: T.scale(T.sum_(q["x"]), 0.0), p) == 0.0


def test_fd_check_detects_wrong_gradient():
    p = {"x": f64(np.random.default_rng(5).normal(size=(2, 4)))}
    assert finite_diff_check(lambda q: T.sum_(T._softmax_faulty(q["x"]) * q["x"]), p) > 1e-2


# ---------------------------------------------------------------------------
# per-op gradient properties on random small shapes

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4))


def _check(fn, arrays, tol=1e-4):
    params = {f"p{i}": f64(a) for i, a in enumerate(arrays)}
    assert finite_diff_check(lambda q: fn(*[q[f"p{i}"] for i in range(len(arrays))]), params) < tol


def _weights(shape, seed):
    return f64(np.random.default_rng(seed + 99).normal(size=shape))


@given(shapes, st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_grad_elementwise_ops(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    c = rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1, 1], size=shape)
    w = _weights(shape, seed)
    _check(lambda x, y: T.sum_(T.add(x, y) * w), [a, b])
    _check(lambda x, y: T.sum_(T.sub(x, y) * w), [a, b])
    _check(lambda x, y: T.sum_(T.mul(x, y) * w), [a, b])
    _check(lambda x, y: T.sum_(T.div(x, y) * w), [a, c])
    _check(lambda x: T.sum_(T.scale(x, -1.7) * w), [a])
    _check(lambda x: T.sum_(T.gelu(x) * w), [a])
    _check(lambda x: T.sum_(T.exp(x) * w), [a])
    _check(lambda x: T.sum_(T.log(T.mul(x, x)) * w), [c])


@given(shapes, st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_grad_broadcast_add_mul(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    b = rng.normal(size=(shape[1],))
    w = _weights(shape, seed)
    _check(lambda x, y: T.sum_(T.add(x, y) * w), [a, b])
    _check(lambda x, y: T.sum_(T.mul(x, y) * w), [a, b])


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_grad_matmul(m, k, n, seed):
    rng = np.random.default_rng(seed)
    w = _weights((2, m, n), seed)
    _check(lambda x, y: T.sum_(T.matmul(x, y) * w), [rng.normal(size=(2, m, k)), rng.normal(size=(k, n))])


@given(shapes, st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_grad_reductions_and_normalizers(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    w = _weights(shape, seed)
    _check(lambda x: T.sum_(T.softmax(x, -1) * w), [a])
    _check(lambda x: T.sum_(T.softmax(x, 0) * w), [a])
    _check(lambda x: T.sum_(T.logsumexp(x, -1) * w[..., 0]), [a])
    _check(lambda x: T.sum_(T.mean_axis(x, 0) * w[0]), [a])
    if shape[1] > 1:
        g, b = rng.normal(size=shape[1]), rng.normal(size=shape[1])
        _check(lambda x, gg, bb: T.sum_(T.layer_norm(x, gg, bb, 1e-5) * w), [a + 0.0, g, b])


@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_grad_shape_ops(m, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, n))
    b = rng.normal(size=(m, 1))
    _check(lambda x: T.sum_(T.reshape(x, (n, m)) * _weights((n, m), seed)), [a])
    _check(lambda x: T.sum_(T.permute(x, (1, 0)) * _weights((n, m), seed)), [a])
    _check(lambda x: T.sum_(x[1:, : n - 1] * _weights((m - 1, n - 1), seed)), [a])
    _check(lambda x, y: T.sum_(T.concat([x, y], 1) * _weights((m, n + 1), seed)), [a, b])
    _check(lambda x: T.sum_(T.zero_pad_assign(x, (m + 1, n), (slice(1, None),)) * _weights((m + 1, n), seed)), [a])
    idx = rng.integers(0, n, size=m)
    _check(lambda x: T.sum_(T.take_last(x, idx) * _weights((m,), seed)), [a])
