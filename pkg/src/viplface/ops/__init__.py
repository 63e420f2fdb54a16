"""Layer kernels: convolution, ReLU, pooling, inner product, dropout,
softmax loss, LRN and the fast normalization layer."""
from .fnl import FnlCache, FnlState, fnl_backward, fnl_forward, fnl_grad, stat_shape
from .layers import (
    ConvParams,
    DropoutParams,
    LrnParams,
    PoolParams,
    conv_backward,
    conv_forward,
    conv_shape,
    dropout_backward,
    dropout_forward,
    fc_backward,
    fc_forward,
    lrn_backward,
    lrn_forward,
    pool_backward,
    pool_forward,
    pool_shape,
    relu_backward,
    relu_forward,
    softmax,
    softmax_loss_backward,
    softmax_loss_forward,
)
