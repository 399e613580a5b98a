from .graph import (
    SMOOTH_ABS_EPS,
    Node,
    add,
    broadcast_cols,
    broadcast_rows,
    broadcast_scalar,
    check_finite,
    concat_rows,
    const,
    cosine,
    detach,
    evaluate,
    evaluate_one,
    exp,
    grad,
    hadamard,
    inp,
    log,
    log_softmax,
    matmul,
    mean,
    neg,
    ones,
    scalar,
    scale,
    sigmoid,
    smooth_abs,
    sub,
    tanh,
    total,
    transpose,
    value_of,
    zeros,
)
from .fd import compare_gradients, fd_gradient

__all__ = [
    "SMOOTH_ABS_EPS",
    "Node",
    "add",
    "broadcast_cols",
    "broadcast_rows",
    "broadcast_scalar",
    "check_finite",
    "compare_gradients",
    "concat_rows",
    "const",
    "cosine",
    "detach",
    "evaluate",
    "evaluate_one",
    "exp",
    "fd_gradient",
    "grad",
    "hadamard",
    "inp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "neg",
    "ones",
    "scalar",
    "scale",
    "sigmoid",
    "smooth_abs",
    "sub",
    "tanh",
    "total",
    "transpose",
    "value_of",
    "zeros",
]
