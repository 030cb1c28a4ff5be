import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inattention import tensor as tn
from inattention.tensor import MemoryTracker, NonFiniteError, Rng, ShapeError, Tensor, grad_check


def rand(shape, seed=0, scale=1.0):
    return Rng(seed).normal(shape, scale)


# ---------------------------------------------------------------- grad_check contract


def test_sum_gives_ones():
    w = Tensor(rand((3, 4)), requires_grad=True)
    tn.backward(tn.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_sum_of_squares():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tn.backward(tn.tsum(tn.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_linear_function_is_exact():
    a = rand((5,), seed=1)
    err = grad_check(lambda x: tn.tsum(tn.mul(x, Tensor(a))), rand((5,), seed=2), eps=1e-3)
    assert err < 1e-9


def test_softmax_cross_entropy_three_classes():
    err = grad_check(lambda z: tn.cross_entropy(z, np.array([2, 0])), rand((2, 3), seed=3), eps=1e-6)
    assert err < 1e-6


def test_corrupted_rule_is_detected(monkeypatch):
    real = tn.scale

    def wrong_scale(a, c):
        out = real(a, c)
        out._backward = lambda g: (g * (c + 0.5),)
        return out

    err = grad_check(lambda x: tn.tsum(wrong_scale(x, 3.0)), rand((4,)), eps=1e-6)
    assert err > 1e-2


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: tn.tsum(x), rand((2,)), eps=0.1)


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("add_broadcast", lambda x: tn.tsum(tn.mul(tn.add(x, Tensor(rand((3, 1), 9))), x)), (3, 4)),
        ("sub", lambda x: tn.tsum(tn.mul(tn.sub(Tensor(rand((4,), 9)), x), x)), (2, 4)),
        ("mul_broadcast", lambda x: tn.tsum(tn.mul(x, tn.mul(x, Tensor(rand((4,), 8))))), (3, 4)),
        ("scale", lambda x: tn.tsum(tn.mul(tn.scale(x, -2.5), x)), (3,)),
        ("gelu", lambda x: tn.tsum(tn.gelu(x)), (4, 5)),
        ("matmul", lambda x: tn.tsum(tn.mul(tn.matmul(x, Tensor(rand((4, 3), 7))), Tensor(rand((2, 3), 6)))), (2, 4)),
        ("matmul_batched", lambda x: tn.tsum(tn.gelu(tn.matmul(x, tn.swapaxes(x, -1, -2)))), (2, 3, 4)),
        ("matmul_flat", lambda x: tn.tsum(tn.gelu(tn.matmul(x, Tensor(rand((4, 2), 5))))), (2, 3, 4)),
        ("transpose", lambda x: tn.tsum(tn.mul(tn.transpose(x, (1, 0, 2)), Tensor(rand((3, 2, 4), 4)))), (2, 3, 4)),
        ("reshape", lambda x: tn.tsum(tn.gelu(tn.reshape(x, (6, 2)))), (3, 4)),
        ("slice_seq", lambda x: tn.tsum(tn.gelu(tn.getitem(x, (slice(None), slice(1, 3))))), (2, 4, 3)),
        ("fancy_index", lambda x: tn.tsum(tn.gelu(tn.getitem(x, np.array([0, 0, 2])))), (3, 2)),
        ("concat_seq", lambda x: tn.tsum(tn.gelu(tn.concat([x, tn.scale(x, 2.0)], axis=1))), (2, 3)),
        ("mean", lambda x: tn.tsum(tn.mul(tn.mean(x, axis=1, keepdims=True), x)), (3, 4)),
        ("softmax", lambda x: tn.tsum(tn.mul(tn.softmax_rows(x), Tensor(rand((3, 5), 3)))), (3, 5)),
        (
            "softmax_masked",
            lambda x: tn.tsum(tn.mul(tn.softmax_rows(x, np.tril(np.ones((4, 4), bool))), Tensor(rand((4, 4), 2)))),
            (4, 4),
        ),
        ("cross_entropy", lambda x: tn.cross_entropy(x, np.array([[1, 3], [0, 2]])), (2, 2, 4)),
    ],
)
def test_op_gradients(name, fn, shape):
    assert grad_check(fn, rand(shape, seed=len(name)), eps=1e-6) < 1e-6, name


def test_layer_norm_gradients():
    g0, b0 = rand((6,), 1), rand((6,), 2)
    x0 = rand((3, 6), 3)
    w = Tensor(rand((3, 6), 4))
    assert grad_check(lambda x: tn.tsum(tn.mul(tn.layer_norm(x, Tensor(g0), Tensor(b0)), w)), x0) < 1e-6
    assert grad_check(lambda g: tn.tsum(tn.mul(tn.layer_norm(Tensor(x0), g, Tensor(b0)), w)), g0) < 1e-6
    assert grad_check(lambda b: tn.tsum(tn.mul(tn.layer_norm(Tensor(x0), Tensor(g0), b), w)), b0) < 1e-6


def test_rotate_pairs_gradient():
    ang = rand((3, 2), 5)
    w = Tensor(rand((3, 4), 6))
    err = grad_check(lambda x: tn.tsum(tn.mul(tn.rotate_pairs(x, np.cos(ang), np.sin(ang)), w)), rand((3, 4), 7))
    assert err < 1e-6


def test_embedding_gradient_accumulates_repeats():
    w = Tensor(rand((5, 3)), requires_grad=True)
    ids = np.array([[1, 1, 4]])
    tn.backward(tn.tsum(tn.embedding(w, ids)))
    expected = np.zeros((5, 3))
    expected[1] = 2.0
    expected[4] = 1.0
    np.testing.assert_array_equal(w.grad, expected)


# ---------------------------------------------------------------- forward values


@pytest.mark.parametrize("x", [-3.0, -0.7, 0.0, 0.3, 1.9, 4.5])
def test_gelu_matches_high_precision(x):
    mpmath.mp.dps = 40
    ref = mpmath.mpf(x) * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2
    got = tn.gelu(Tensor(np.array([x]))).data[0]
    assert abs(got - float(ref)) < 1e-15


def test_cross_entropy_matches_high_precision():
    mpmath.mp.dps = 40
    z = np.array([[2.0, -1.0, 0.5], [0.0, 3.0, -2.0]])
    t = np.array([0, 2])
    ref = 0
    for row, k in zip(z, t):
        lse = mpmath.log(sum(mpmath.e ** mpmath.mpf(v) for v in row))
        ref += lse - mpmath.mpf(row[k])
    assert abs(tn.cross_entropy(Tensor(z), t).item() - float(ref / 2)) < 1e-14


def test_softmax_large_logits_are_stable():
    out = tn.softmax_rows(Tensor(np.array([[1000.0, 1000.0, -1000.0]])))
    np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]])


def test_masked_entries_are_exactly_zero():
    out = tn.softmax_rows(Tensor(rand((3, 3))), np.tril(np.ones((3, 3), bool)))
    assert out.data[0, 1] == 0.0 and out.data[1, 2] == 0.0
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0)


def test_fully_masked_row_raises():
    with pytest.raises(tn.DegenerateMaskError):
        tn.softmax_rows(Tensor(rand((2, 2))), np.array([[True, False], [False, False]]))


def test_layer_norm_output_statistics():
    out = tn.layer_norm(Tensor(rand((4, 16), scale=5.0)), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=0.0)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- errors and plumbing


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(rand((2, 3))), Tensor(rand((4, 2))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        tn.scale(Tensor(np.array([1e308])), 10.0)
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        tn.backward(Tensor(rand((2,)), requires_grad=True))


def test_no_grad_records_nothing():
    x = Tensor(rand((3,)), requires_grad=True)
    with tn.no_grad():
        y = tn.mul(x, x)
    assert not y.requires_grad and y._parents == ()
    assert tn.is_grad_enabled()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = tn.mul(x, x)
    tn.backward(tn.tsum(tn.add(y, y)))
    np.testing.assert_array_equal(x.grad, [12.0])


def test_backward_is_deterministic():
    def run():
        x = Tensor(rand((4, 6), 1), requires_grad=True)
        h = tn.gelu(tn.matmul(x, Tensor(rand((6, 6), 2))))
        tn.backward(tn.cross_entropy(tn.add(h, tn.softmax_rows(h)), np.array([0, 1, 2, 3])))
        return x.grad

    assert np.array_equal(run(), run())


def test_deep_graph_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = tn.scale(y, 1.0)
    tn.backward(tn.tsum(y))
    assert x.grad[0] == 1.0


def test_rng_is_reproducible():
    assert np.array_equal(Rng(7).normal((3,)), Rng(7).normal((3,)))
    assert not np.array_equal(Rng(7).normal((3,)), Rng(8).normal((3,)))


# ---------------------------------------------------------------- memory tracker


def test_tracker_counts_views_once_and_releases():
    with tn.no_grad(), MemoryTracker() as mt:
        a = Tensor(np.zeros(1000))
        assert mt.live == 8000
        b = tn.reshape(a, (10, 100))
        assert mt.live == 8000
        del a
        assert mt.live == 8000
        del b
        assert mt.live == 0
    assert mt.peak == 8000


def test_tracker_peak_and_adopt():
    p = Tensor(np.zeros(10))
    with tn.no_grad(), MemoryTracker() as mt:
        mt.adopt([p])
        tmp = tn.scale(Tensor(np.ones(100)), 2.0)
        del tmp
    assert mt.peak == 80 + 800 + 800


def test_tracker_rejects_nesting():
    with MemoryTracker():
        with pytest.raises(RuntimeError):
            with MemoryTracker():
                pass


# ---------------------------------------------------------------- properties


finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_broadcast_axes(a, b):
    x = Tensor(a, requires_grad=True)
    y = Tensor(b, requires_grad=True)
    tn.backward(tn.tsum(tn.add(x, y)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(y.grad, np.full(4, 3.0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_rows_sum_to_one(a):
    out = tn.softmax_rows(Tensor(a)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.0, 2 * math.pi))
def test_rotation_preserves_pair_norms(a, theta):
    out = tn.rotate_pairs(Tensor(a), np.cos(theta), np.sin(theta)).data
    n_in = a[:, 0::2] ** 2 + a[:, 1::2] ** 2
    n_out = out[:, 0::2] ** 2 + out[:, 1::2] ** 2
    np.testing.assert_allclose(n_out, n_in, rtol=1e-12, atol=1e-12)
