from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import (
    ConfigError,
    Dropout,
    Embedding,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Parameter,
    TransformerBlock,
    multi_head_attention,
)
from .optim import AdamW, NonFiniteGradientError, OptimizerState, adamw_step, lr_at_step
from .tensor import (
    DimensionError,
    GradientError,
    Tensor,
    add,
    concat,
    detach,
    dropout,
    embedding,
    exp,
    gelu,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    softmax_cross_entropy,
    tanh,
    tensor,
    transpose,
    tsum,
)
