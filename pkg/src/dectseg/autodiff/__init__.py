from .ops import (
    RunningStats,
    batchnorm3d,
    concat,
    conv3d,
    conv_transpose3d,
    inverse_frequency_weights,
    maxpool3d,
    relu,
    softmax_channel,
    weighted_cross_entropy,
)
from .optim import Adam, OptimizerState, optimizer_step, sgd_step
from .tensor import NonFiniteError, Tensor, backward, set_finite_checks, topological_order

__all__ = [
    "Adam",
    "NonFiniteError",
    "OptimizerState",
    "RunningStats",
    "Tensor",
    "backward",
    "batchnorm3d",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "inverse_frequency_weights",
    "maxpool3d",
    "optimizer_step",
    "relu",
    "set_finite_checks",
    "sgd_step",
    "softmax_channel",
    "topological_order",
    "weighted_cross_entropy",
]
