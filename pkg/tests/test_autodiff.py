"""Kernel tests: tape semantics, op forwards, and finite-difference checks."""

import numpy as np
import pytest

from adaptivescan.autodiff import Tensor, Tape, backward, check_gradients, run_op_checks
from adaptivescan.autodiff import ops


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        loss = ops.reduce_sum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))


def test_dot_gradient_is_other_vector():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=5), requires_grad=True)
    y = rng.normal(size=5)
    with Tape() as tape:
        loss = ops.reduce_sum(ops.mul(x, ops.constant(y)))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], y, rtol=0, atol=0)


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        ops.scale(unused, 2.0)  # on the tape but unconnected to the loss
        loss = ops.reduce_sum(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[unused], np.zeros(4))
    np.testing.assert_array_equal(grads[x], np.ones(3))


def test_double_backward_accumulates_exactly_twice():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ops.l2_norm(ops.relu(ops.matmul(x, w)))
    g1 = backward(tape, loss)
    once_x, once_w = x.grad.copy(), w.grad.copy()
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2.0 * once_x)
    np.testing.assert_array_equal(w.grad, 2.0 * once_w)
    np.testing.assert_array_equal(g1[x], once_x)


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ops.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, out)


def test_softmax_trivial_cases():
    out = ops.softmax(Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=0)
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 7))
    rows = ops.softmax(Tensor(z), axis=-1).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 6))
    base = ops.softmax(Tensor(z), axis=-1).data
    shifted = ops.softmax(Tensor(z + 3.7), axis=-1).data
    assert np.abs(base - shifted).max() <= 1e-12


def test_matmul_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))
    out = ops.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_shape_error_names_op():
    with pytest.raises(ValueError, match="matmul"):
        ops.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


def test_layernorm_constant_vector_is_zero():
    out = ops.layernorm(Tensor(np.full(8, 3.25)))
    np.testing.assert_array_equal(out.data, np.zeros(8))


def test_mlp_loss_matches_finite_differences():
    rng = np.random.default_rng(5)
    w1 = ops.constant(rng.normal(size=(6, 8)) * 0.5)
    b1 = ops.constant(rng.normal(size=(8,)) * 0.1)
    w2 = ops.constant(rng.normal(size=(8, 1)) * 0.5)
    target = ops.constant(rng.normal(size=(4, 1)))

    def loss_fn(x):
        h = ops.relu(ops.add(ops.matmul(x, w1), b1))
        pred = ops.matmul(h, w2)
        diff = ops.sub(pred, target)
        return ops.reduce_sum(ops.mul(diff, diff))

    err = check_gradients(loss_fn, Tensor(rng.normal(size=(4, 6))))
    assert err <= 1e-6


def test_check_gradients_quadratic():
    rng = np.random.default_rng(6)
    err = check_gradients(lambda x: ops.reduce_sum(ops.mul(x, x)),
                          Tensor(rng.normal(size=(7,))))
    assert err <= 1e-6


def test_check_gradients_softmax_component():
    err = check_gradients(lambda x: ops.take(ops.softmax(x), np.array([0])),
                          Tensor(np.zeros(2)))
    assert err <= 1e-6


def test_check_gradients_constant_function():
    err = check_gradients(lambda x: ops.reduce_sum(ops.mul(x, ops.constant(np.zeros(4)))),
                          Tensor(np.ones(4)))
    assert err == 0.0


def test_check_gradients_rejects_nonfinite_point():
    with pytest.raises(ValueError, match="non-finite"):
        check_gradients(lambda x: ops.reduce_sum(x), Tensor(np.array([1.0, np.nan])))


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    xp = np.zeros((2, 7, 8))
    xp[:, 1:6, 1:7] = x
    expected = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                expected[o, i, j] = (w[o] * xp[:, i:i + 3, j:j + 3]).sum()
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_depthwise_conv2d_acts_per_channel():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 4))
    w = np.zeros((2, 3, 3))
    w[:, 1, 1] = [2.0, -1.0]  # pure center taps scale each channel
    out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out[0], 2.0 * x[0], atol=1e-12)
    np.testing.assert_allclose(out[1], -1.0 * x[1], atol=1e-12)


def test_adaptive_pool_identity_when_sizes_match():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4, 6))
    out = ops.adaptive_avg_pool2d(Tensor(x), (4, 6)).data
    np.testing.assert_array_equal(out, x)


def test_straight_through_forward_hard_backward_soft():
    z = Tensor(np.array([0.3, -0.8]), requires_grad=True)
    readout = np.array([1.5, -2.0])

    def through_soft(t):
        soft = ops.softmax(t)
        return ops.reduce_sum(ops.mul(soft, ops.constant(readout)))

    with Tape() as tape:
        soft = ops.softmax(z)
        hard = np.array([1.0, 0.0])
        st = ops.straight_through(hard, soft)
        loss = ops.reduce_sum(ops.mul(st, ops.constant(readout)))
    np.testing.assert_array_equal(st.data, hard)
    g_st = backward(tape, loss)[z]

    z2 = Tensor(z.data.copy(), requires_grad=True)
    with Tape() as tape2:
        loss2 = through_soft(z2)
    g_soft = backward(tape2, loss2)[z2]
    np.testing.assert_allclose(g_st, g_soft, atol=1e-15)


def test_registered_op_suite_passes_tolerance():
    results = run_op_checks(instances=20)
    worst = max(results.values())
    assert worst <= 1e-4, f"op gradcheck failed: {results}"
