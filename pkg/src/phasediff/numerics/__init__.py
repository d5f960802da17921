"""Dense-tensor arithmetic and reverse-mode differentiation for small networks."""

from .oracle import central_difference, directional_derivative
from .params import GradientRecord, ParamVector
from .tape import (
    Graph,
    Tape,
    Var,
    add_n,
    affine,
    backward,
    concat,
    evaluate,
    jvp,
    log_clamped,
    per_example_gradients,
    pick,
    relu,
    scale,
    sigmoid,
    softmax,
    softplus,
    square_sum,
    tanh,
)

__all__ = [
    "GradientRecord", "ParamVector", "Graph", "Tape", "Var",
    "evaluate", "backward", "per_example_gradients", "jvp",
    "central_difference", "directional_derivative",
    "affine", "sigmoid", "tanh", "relu", "softplus", "softmax",
    "log_clamped", "pick", "square_sum", "concat", "add_n", "scale",
]
