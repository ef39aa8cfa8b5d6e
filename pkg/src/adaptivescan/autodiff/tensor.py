"""Tensor and Tape primitives.

A Tensor owns a float64 numpy array plus gradient bookkeeping. A Tape is an
ordered record of executed ops; walking it in reverse propagates gradients.
Tapes nest on a thread-local stack, so independent tapes may run on separate
threads. Ops executed with no active tape are plain numpy evaluations, which
is the fast path used for frozen-model inference.
"""

import threading

import numpy as np


class Tensor:
    """Dense float64 array with optional gradient accumulation.

    Data is treated as immutable after construction; only `grad` mutates.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


_STACK = threading.local()


def _stack():
    stack = getattr(_STACK, "tapes", None)
    if stack is None:
        stack = []
        _STACK.tapes = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Strictly sequential record of ops for one reverse pass.

    Each entry is (output, inputs, backward_fn) where backward_fn maps the
    output gradient to one gradient array (or None) per input. `backward`
    visits entries exactly once, in reverse recording order.
    """

    def __init__(self):
        self.entries = []
        self._live = set()

    def record(self, out, inputs, backward_fn):
        self.entries.append((out, tuple(inputs), backward_fn))
        self._live.add(id(out))

    def tracks(self, tensor):
        """True if a gradient can reach this tensor on this tape."""
        return tensor.requires_grad or id(tensor) in self._live

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: mismatched exit")
        return False


def backward(tape, loss):
    """Propagate d(loss)/d(tensor) through `tape` in reverse order.

    Gradients accumulate into `.grad` of every requires_grad leaf recorded on
    the tape (zeros if the leaf does not reach the loss); a map from those
    leaves to this pass's gradient is returned. Calling backward twice on the
    same tape without zeroing grads accumulates exactly twice the gradient,
    because each pass uses its own propagation buffer.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.entries):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        in_grads = backward_fn(g_out)
        for tensor, g in zip(inputs, in_grads):
            if g is None or not tape.tracks(tensor):
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    # Every requires_grad leaf seen by the tape gets a gradient, unused ones zero.
    leaves = {}
    for _, inputs, _ in tape.entries:
        for tensor in inputs:
            if tensor.requires_grad:
                leaves[id(tensor)] = tensor
    if loss.requires_grad:
        leaves[id(loss)] = loss

    result = {}
    for key, tensor in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(tensor.data)
        tensor.accumulate_grad(g)
        result[tensor] = np.asarray(g, dtype=np.float64)
    return result
