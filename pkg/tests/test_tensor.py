"""Tensor engine: forward semantics against numpy, gradients against
central differences, domain errors, tape behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from margrid import tensor as T
from margrid.gradcheck import check_primitives
from margrid.tensor import DomainError, NumericError, ShapeError, TensorError


def finite_arrays(shape=(3, 4), lo=-3.0, hi=3.0):
    return arrays(np.float64, shape,
                  elements=st.floats(lo, hi, allow_nan=False, width=64))


# ---------------------------------------------------------------------------
# forward values


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 4))
    out = T.matmul(T.constant(a), T.constant(b)).numpy()
    want = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            acc = 0.0
            for k in range(7):
                acc += a[i, k] * b[k, j]
            want[i, j] = acc
    assert np.allclose(out, want, atol=1e-12, rtol=0.0)


def test_affine_equals_matmul_plus_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 7))
    w = rng.standard_normal((7, 3))
    b = rng.standard_normal(3)
    fused = T.affine(T.constant(x), T.constant(w), T.constant(b)).numpy()
    split = T.add(T.matmul(T.constant(x), T.constant(w)), T.constant(b)).numpy()
    assert np.array_equal(fused, split)


def test_affine_gradients_match_split_form():
    rng = np.random.default_rng(2)
    xv = rng.standard_normal((4, 6))
    wv = rng.standard_normal((6, 3))
    bv = rng.standard_normal(3)

    def run(fn):
        x, w, b = T.parameter(xv.copy()), T.parameter(wv.copy()), T.parameter(bv.copy())
        T.backward(T.tsum(fn(x, w, b)))
        grads = (x.grad.copy(), w.grad.copy(), b.grad.copy())
        T.clear_tape()
        return grads

    fused = run(T.affine)
    split = run(lambda x, w, b: T.add(T.matmul(x, w), b))
    for gf, gs in zip(fused, split):
        assert np.allclose(gf, gs, atol=1e-12, rtol=0.0)


@settings(max_examples=60, deadline=None)
@given(finite_arrays(), finite_arrays())
def test_elementwise_forward_matches_numpy(a, b):
    assert np.array_equal(T.add(T.constant(a), T.constant(b)).numpy(), a + b)
    assert np.array_equal(T.sub(T.constant(a), T.constant(b)).numpy(), a - b)
    assert np.array_equal(T.mul(T.constant(a), T.constant(b)).numpy(), a * b)
    assert np.array_equal(T.minimum(T.constant(a), T.constant(b)).numpy(),
                          np.minimum(a, b))


@settings(max_examples=40, deadline=None)
@given(finite_arrays(lo=-20.0, hi=20.0))
def test_exp_log_roundtrip(a):
    back = T.log(T.exp(T.constant(a))).numpy()
    assert np.allclose(back, a, atol=1e-12, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=5),
              elements=st.floats(-50.0, 50.0, allow_nan=False, width=64)))
def test_softmax_rows_sum_to_one(a):
    rows = T.softmax(T.constant(a), axis=-1).numpy().sum(axis=-1)
    assert np.allclose(rows, 1.0, atol=1e-12, rtol=0.0)


def test_clip_bounds_and_tie_gradient():
    x = T.parameter(np.array([-2.0, 0.3, 2.0]))
    out = T.clip(x, -1.0, 1.0)
    assert np.array_equal(out.numpy(), [-1.0, 0.3, 1.0])
    T.backward(T.tsum(out))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])
    T.clear_tape()


def test_minimum_ties_route_to_first_operand():
    a = T.parameter(np.array([1.0, 2.0]))
    b = T.parameter(np.array([1.0, 5.0]))
    T.backward(T.tsum(T.minimum(a, b)))
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 0.0])
    T.clear_tape()


def test_broadcasting_backward_unbroadcasts():
    a = T.parameter(np.ones((3, 4)))
    b = T.parameter(np.ones(4))
    T.backward(T.tsum(T.mul(a, b)))
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, np.full(4, 3.0))
    T.clear_tape()


def test_take_rows_backward_accumulates_repeats():
    a = T.parameter(np.arange(5.0))
    out = T.take_rows(a, np.array([1, 1, 3]))
    T.backward(T.tsum(out))
    assert np.array_equal(a.grad, [0.0, 2.0, 0.0, 1.0, 0.0])
    T.clear_tape()


# ---------------------------------------------------------------------------
# gradients: every primitive against central differences


def test_every_primitive_passes_finite_differences():
    report = check_primitives(seed=1)
    worst = max(report.values())
    assert worst < 1e-6, f"worst case {max(report, key=report.get)}: {worst:.3e}"


def test_grad_accumulates_across_backward_calls():
    x = T.parameter(np.array([2.0]))
    T.backward(T.tsum(T.square(x)))
    first = x.grad.copy()
    T.clear_tape()
    T.backward(T.tsum(T.square(x)))
    assert np.array_equal(x.grad, 2.0 * first)
    T.clear_tape()


def test_no_grad_suppresses_taping():
    x = T.parameter(np.ones(3))
    before = T.tape_size()
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert T.tape_size() == before
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# errors


def test_division_by_zero_raises():
    with pytest.raises(DomainError):
        T.div(T.constant(np.ones(2)), T.constant(np.array([1.0, 0.0])))


def test_log_of_nonpositive_raises():
    with pytest.raises(DomainError):
        T.log(T.constant(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        T.log(T.constant(np.array([-1.0])))


def test_sqrt_of_negative_raises():
    with pytest.raises(DomainError):
        T.sqrt(T.constant(np.array([-1e-12])))


def test_exp_overflow_raises_numeric_error():
    with pytest.raises(NumericError):
        T.exp(T.constant(np.array([1e4])))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.matmul(T.constant(np.ones(3)), T.constant(np.ones((3, 2))))


def test_affine_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.affine(T.constant(np.ones((2, 3))), T.constant(np.ones((3, 4))),
                 T.constant(np.ones(5)))


def test_backward_needs_scalar_and_nonempty_tape():
    x = T.parameter(np.ones(3))
    y = T.mul(x, 2.0)
    with pytest.raises(ShapeError):
        T.backward(y)
    T.clear_tape()
    with pytest.raises(TensorError):
        T.backward(T.constant(np.array(1.0)))
