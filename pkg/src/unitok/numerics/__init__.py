from .gradcheck import finite_difference_check
from .optim import AdamW, NonFiniteError, OptimizerState, adam_step, annealed_lr, cosine_lr
from .tensor import (
    ComputeGraph,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    dropout,
    embedding,
    exp,
    getitem,
    grad_enabled,
    log,
    log_softmax,
    logsigmoid,
    make_op,
    masked_fill,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    straight_through,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
