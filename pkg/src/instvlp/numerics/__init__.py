from .grad import directional_fd, finite_diff_grad, relative_error, value_and_grad
from .tensor import (
    DimensionError,
    Tensor,
    UnsupportedOperationError,
    as_tensor,
    concat,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    softmax,
    stack,
    where,
)

__all__ = [
    "DimensionError",
    "Tensor",
    "UnsupportedOperationError",
    "as_tensor",
    "concat",
    "directional_fd",
    "finite_diff_grad",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "matmul",
    "relative_error",
    "softmax",
    "stack",
    "value_and_grad",
    "where",
]
