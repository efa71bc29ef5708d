"""A small array-valued reverse-mode autodiff engine and the Adam optimizer."""

from .optim import AdamHyper, AdamState, OptimizerError, adam_step
from .tape import (
    Gradients,
    NonFiniteError,
    Tape,
    Var,
    add,
    apply,
    backward,
    concat,
    cumsum,
    exp,
    log,
    logistic,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    reciprocal,
    relu,
    reshape,
    scatter,
    stable_logistic,
    take,
)
from .tape import sum  # noqa: A004 - mirrors numpy
