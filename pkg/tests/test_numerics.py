import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from _internal.errors import NumericalAbort, ShapeError, TapeError
from _internal.numerics import (
    OPS,
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    elu,
    grad_check,
    matmul,
    mul,
    no_grad,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax,
)


@pytest.mark.parametrize(
    "op,x,expected",
    [
        (softmax, [0.0, 0.0], [0.5, 0.5]),
        (elu, [-1.0], [math.exp(-1.0) - 1.0]),
        (elu, [2.0], [2.0]),
        (relu, [-1.0, 0.5], [0.0, 0.5]),
    ],
)
def test_forward_examples(op, x, expected):
    assert_allclose(op(Tensor(x)).data, expected, atol=1e-12)


def test_elu_of_minus_one_matches_reference_value():
    assert elu(Tensor([-1.0])).item() == pytest.approx(-0.63212, abs=1e-5)


def test_every_documented_kernel_is_registered():
    expected = {
        "add", "sub", "mul", "matmul", "scale", "relu", "elu", "sigmoid",
        "tanh", "abs", "sum", "mean", "softmax", "reshape", "concat", "stack",
    }
    assert expected <= set(OPS)


@pytest.mark.parametrize(
    "fn,a,b",
    [
        (add, np.ones((2, 3)), np.ones((3, 2))),
        (mul, np.ones((2, 3)), np.ones((2,))),
        (matmul, np.ones((2, 3)), np.ones((2, 3))),
    ],
)
def test_shape_rules_reject_mismatches(fn, a, b):
    with pytest.raises(ShapeError):
        fn(Tensor(a), Tensor(b))


def test_reshape_rejects_wrong_size():
    with pytest.raises(ShapeError):
        reshape(Tensor(np.ones(6)), (4, 2))


def test_length_one_axes_broadcast_and_reduce_back():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(a, b))
    backward(tape, loss)
    assert b.grad.shape == (1, 3)
    assert_array_equal(b.grad, [[2.0, 2.0, 2.0]])


# ============================================================
#                        BACKWARD
# ============================================================

def test_backward_of_sum_of_squares():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    backward(tape, loss)
    assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_constant_loss_leaves_grads_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(Tensor([3.0, 4.0]))
    backward(tape, loss)
    assert_array_equal(x.grad, [0.0, 0.0])


def test_sum_of_softmax_has_zero_gradient():
    x = Tensor([0.3, -1.2, 2.0, 0.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(softmax(x))
    backward(tape, loss)
    assert_allclose(x.grad, np.zeros(4), atol=1e-12)


def test_backward_twice_on_one_tape_is_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)


def test_non_scalar_loss_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = mul(x, x)
    with pytest.raises(TapeError):
        backward(tape, out)


def test_fan_out_accumulates_path_gradients():
    x1 = Tensor([0.5, -1.5], requires_grad=True)
    x2 = Tensor([0.5, -1.5], requires_grad=True)
    with Tape() as t1:
        l1 = reduce_sum(mul(add(x1, x1), x1))
    backward(t1, l1)
    with Tape() as t2:
        l2 = reduce_sum(mul(scale(x2, 2.0), x2))
    backward(t2, l2)
    assert_array_equal(x1.grad, x2.grad)


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = reduce_sum(scale(x, 3.0))
        backward(tape, loss)
    assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert_array_equal(x.grad, [0.0, 0.0])


def test_ops_outside_a_tape_record_nothing():
    x = Tensor([1.0], requires_grad=True)
    out = mul(x, x)
    assert not out.requires_grad
    assert out.is_leaf


def test_no_grad_suspends_an_active_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            mul(x, x)
        assert len(tape) == 0
        mul(x, x)
    assert len(tape) == 1


def test_item_requires_a_scalar():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0.0)
    assert_allclose(out.sum(axis=-1), np.ones(x.shape[0]), atol=1e-12)


# ============================================================
#                          ADAM
# ============================================================

def test_adam_first_step_moves_by_learning_rate():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.for_params([p], lr=0.001)
    adam_step([p], [np.array([1.0])], state)
    assert state.t == 1
    assert p.data[0] == pytest.approx(-0.001, abs=1e-10)


def test_adam_two_constant_steps():
    # bias correction makes m̂ = v̂ = 1 at both t = 1 and t = 2
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.for_params([p], lr=0.001)
    for _ in range(2):
        adam_step([p], [np.array([1.0])], state)
    assert p.data[0] == pytest.approx(-0.002, abs=1e-10)


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    before = p.data.copy()
    state = AdamState.for_params([p])
    for _ in range(5):
        adam_step([p], [np.zeros((3, 4))], state)
    assert np.max(np.abs(p.data - before)) <= 1e-12


def test_adam_rejects_non_finite_gradients():
    p = Tensor([1.0, 2.0], requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(NumericalAbort):
        adam_step([p], [np.array([np.nan, 0.0])], state)
    assert state.t == 0
    assert_array_equal(p.data, [1.0, 2.0])


def test_adam_rejects_shape_mismatch():
    p = Tensor([1.0, 2.0], requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], state)


# ============================================================
#                       GRAD CHECK
# ============================================================

def test_grad_check_square():
    theta = Tensor([3.0], requires_grad=True)
    report = grad_check(lambda: reduce_sum(mul(theta, theta)), [theta], h=1e-5, tol=1e-6)
    assert report.passed
    assert theta.grad[0] == pytest.approx(6.0)


def test_grad_check_constant_function():
    theta = Tensor([0.7, -0.2], requires_grad=True)
    report = grad_check(lambda: reduce_sum(Tensor([1.0])), [theta])
    assert report.max_rel_err == 0.0
    assert report.passed


def test_grad_check_flags_a_wrong_gradient():
    theta = Tensor([0.4, 0.9], requires_grad=True)
    # detaching hides one path from the tape, so the analytic gradient is wrong
    report = grad_check(lambda: reduce_sum(mul(theta, theta.detach())), [theta])
    assert not report.passed


def test_grad_check_rejects_non_positive_step():
    theta = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: reduce_sum(theta), [theta], h=0.0)
