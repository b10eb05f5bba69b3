from .graph import PRIMITIVES, forward
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, AdamState, ParamSet, adam_step
from .tensor import (
    LEAKY_SLOPE,
    Tensor,
    add,
    affine,
    backward,
    broadcast_to,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    enable_grad,
    fold,
    grad,
    is_grad_enabled,
    leaky_relu,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sq_norm,
    sum_,
    sum_to,
    tanh,
    transpose,
    unfold,
)
