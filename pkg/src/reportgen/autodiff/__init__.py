from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    reshape,
    scale,
    sqrt,
    stack,
    sub,
    swapaxes,
    transpose,
    tsum,
)
from .ops import (
    conv2d,
    cross_entropy,
    dropout,
    embedding_lookup,
    layer_norm,
    linear,
    log_softmax,
    normalize,
    relu,
    sigmoid,
    softmax,
    swish,
)
from .gradcheck import GradCheckResult, NondeterministicFunctionError, grad_check, relative_error
from .checkpoint import load_params, read_manifest, save_params

__all__ = [name for name in dir() if not name.startswith("_")]
