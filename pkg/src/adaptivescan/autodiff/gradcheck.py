"""Finite-difference verification of analytic gradients.

`check_gradients` compares reverse-mode gradients against central differences
coordinate by coordinate. `OP_CHECKS` registers one randomized scalar-valued
probe per differentiable op; `run_op_checks` sweeps them all and is the first
half of the gradcheck acceptance gate.
"""

import zlib

import numpy as np

from .tensor import Tensor, Tape, backward
from . import ops

DEFAULT_STEP = 1e-5


def check_gradients(function, point, step=DEFAULT_STEP):
    """Max relative error between reverse-mode and numeric gradients.

    `function` must map one Tensor to a scalar Tensor and be evaluable at
    points perturbed by `step`. The error metric per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("check_gradients: evaluation point contains non-finite values")

    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("check_gradients: function must return a scalar tensor")
    if not np.all(np.isfinite(out.data)):
        raise ValueError("check_gradients: function value is non-finite at the point")
    analytic = backward(tape, out)[leaf]

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    base = x0.reshape(-1)
    for i in range(base.size):
        saved = base[i]
        base[i] = saved + step
        f_plus = function(Tensor(x0)).data.reshape(())
        base[i] = saved - step
        f_minus = function(Tensor(x0)).data.reshape(())
        base[i] = saved
        flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def _readout(out, w):
    return ops.reduce_sum(ops.mul(out, ops.constant(w)))


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


# Each entry: name -> builder(rng) -> (function, start point ndarray).
OP_CHECKS = {}


def _register(name):
    def deco(fn):
        OP_CHECKS[name] = fn
        return fn
    return deco


@_register("add")
def _chk_add(rng):
    b = ops.constant(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return lambda x: _readout(ops.add(x, b), w), rng.normal(size=(3, 4))


@_register("sub")
def _chk_sub(rng):
    b = ops.constant(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return lambda x: _readout(ops.sub(b, x), w), rng.normal(size=(3, 4))


@_register("mul")
def _chk_mul(rng):
    b = ops.constant(rng.normal(size=(4,)))  # broadcast across rows
    w = rng.normal(size=(3, 4))
    return lambda x: _readout(ops.mul(x, b), w), rng.normal(size=(3, 4))


@_register("div")
def _chk_div(rng):
    b = ops.constant(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return lambda x: _readout(ops.div(x, b), w), rng.normal(size=(3, 4))


@_register("scale")
def _chk_scale(rng):
    c = float(rng.uniform(-2.0, 2.0))
    w = rng.normal(size=(2, 5))
    return lambda x: _readout(ops.scale(x, c), w), rng.normal(size=(2, 5))


@_register("matmul")
def _chk_matmul(rng):
    b = ops.constant(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return lambda x: _readout(ops.matmul(x, b), w), rng.normal(size=(3, 4))


@_register("exp")
def _chk_exp(rng):
    w = rng.normal(size=(3, 3))
    return lambda x: _readout(ops.exp(x), w), rng.normal(size=(3, 3))


@_register("log")
def _chk_log(rng):
    w = rng.normal(size=(6,))
    return lambda x: _readout(ops.log(x), w), rng.uniform(0.3, 3.0, size=(6,))


@_register("relu")
def _chk_relu(rng):
    w = rng.normal(size=(4, 4))
    return lambda x: _readout(ops.relu(x), w), _away_from_zero(rng, (4, 4))


@_register("maximum")
def _chk_maximum(rng):
    # Keep the two branches separated so the finite-difference step never
    # crosses the tie, where the subgradient is one sided.
    a0 = rng.normal(size=(3, 3))
    b0 = a0 + _away_from_zero(rng, (3, 3), low=0.3)
    b = ops.constant(b0)
    w = rng.normal(size=(3, 3))
    return lambda x: _readout(ops.maximum(x, b), w), a0


@_register("absolute")
def _chk_absolute(rng):
    w = rng.normal(size=(5,))
    return lambda x: _readout(ops.absolute(x), w), _away_from_zero(rng, (5,))


@_register("sigmoid")
def _chk_sigmoid(rng):
    w = rng.normal(size=(4,))
    return lambda x: _readout(ops.sigmoid(x), w), rng.normal(size=(4,)) * 2.0


@_register("pow_const")
def _chk_pow_const(rng):
    p = float(rng.uniform(0.5, 3.0))
    w = rng.normal(size=(5,))
    return lambda x: _readout(ops.pow_const(x, p), w), rng.uniform(0.3, 2.0, size=(5,))


@_register("softmax")
def _chk_softmax(rng):
    w = rng.normal(size=(3, 5))
    return lambda x: _readout(ops.softmax(x, axis=-1), w), rng.normal(size=(3, 5))


@_register("layernorm")
def _chk_layernorm(rng):
    w = rng.normal(size=(3, 6))
    return lambda x: _readout(ops.layernorm(x), w), rng.normal(size=(3, 6))


@_register("concat")
def _chk_concat(rng):
    b = ops.constant(rng.normal(size=(3, 2)))
    w = rng.normal(size=(3, 6))
    return lambda x: _readout(ops.concat([x, b, x], axis=1), w), rng.normal(size=(3, 2))


@_register("reshape")
def _chk_reshape(rng):
    w = rng.normal(size=(2, 6))
    return lambda x: _readout(ops.reshape(x, (2, 6)), w), rng.normal(size=(3, 4))


@_register("transpose")
def _chk_transpose(rng):
    w = rng.normal(size=(4, 2, 3))
    return lambda x: _readout(ops.transpose(x, (2, 0, 1)), w), rng.normal(size=(2, 3, 4))


@_register("take")
def _chk_take(rng):
    idx = rng.integers(0, 5, size=7)
    w = rng.normal(size=(7, 2))
    return lambda x: _readout(ops.take(x, idx), w), rng.normal(size=(5, 2))


@_register("reduce_sum")
def _chk_reduce_sum(rng):
    w = rng.normal(size=(4,))
    return lambda x: _readout(ops.reduce_sum(x, axis=0), w), rng.normal(size=(3, 4))


@_register("reduce_mean")
def _chk_reduce_mean(rng):
    w = rng.normal(size=(3,))
    return lambda x: _readout(ops.reduce_mean(x, axis=1), w), rng.normal(size=(3, 4))


@_register("conv2d")
def _chk_conv2d(rng):
    wgt = ops.constant(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    bias = ops.constant(rng.normal(size=(3,)))
    w = rng.normal(size=(3, 4, 5))
    return lambda x: _readout(ops.conv2d(x, wgt, bias), w), rng.normal(size=(2, 4, 5))


@_register("conv2d_weights")
def _chk_conv2d_weights(rng):
    x = ops.constant(rng.normal(size=(2, 4, 5)))
    w = rng.normal(size=(3, 4, 5))
    return lambda k: _readout(ops.conv2d(x, k), w), rng.normal(size=(3, 2, 1, 1)) * 0.5


@_register("depthwise_conv2d")
def _chk_depthwise(rng):
    wgt = ops.constant(rng.normal(size=(3, 3, 3)) * 0.5)
    bias = ops.constant(rng.normal(size=(3,)))
    w = rng.normal(size=(3, 4, 4))
    return lambda x: _readout(ops.depthwise_conv2d(x, wgt, bias), w), rng.normal(size=(3, 4, 4))


@_register("adaptive_avg_pool2d")
def _chk_pool(rng):
    w = rng.normal(size=(2, 3, 2))
    return lambda x: _readout(ops.adaptive_avg_pool2d(x, (3, 2)), w), rng.normal(size=(2, 5, 7))


@_register("l1_norm")
def _chk_l1(rng):
    return lambda x: ops.l1_norm(x), _away_from_zero(rng, (3, 3))


@_register("l2_norm")
def _chk_l2(rng):
    return lambda x: ops.l2_norm(x), _away_from_zero(rng, (7,))


def run_op_checks(instances=20, step=DEFAULT_STEP, seed=0):
    """Run every registered op probe `instances` times.

    Returns {op name: max relative error} over all instances.
    """
    results = {}
    for name, builder in OP_CHECKS.items():
        rng = np.random.default_rng(seed + zlib.crc32(name.encode()) % 10000)
        worst = 0.0
        for _ in range(instances):
            fn, x0 = builder(rng)
            worst = max(worst, check_gradients(fn, Tensor(x0), step=step))
        results[name] = worst
    return results
