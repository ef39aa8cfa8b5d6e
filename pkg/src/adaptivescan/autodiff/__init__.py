"""Reverse-mode automatic differentiation on dense float64 arrays.

Everything learned in this package trains through this kernel: a Tensor
wrapper, an explicit Tape of recorded operations, a library of differentiable
ops, and a central finite-difference verifier used by the gradcheck suite.
"""

from .tensor import Tensor, Tape, active_tape, backward
from .gradcheck import check_gradients, OP_CHECKS, run_op_checks
from . import ops

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "backward",
    "check_gradients",
    "OP_CHECKS",
    "run_op_checks",
    "ops",
]
