from .model import SegModel, forward_array, predict_probs
from .optim import OptimizerState, poly_lr, sgd_step
from .tensor import (
    DimensionError,
    LabelRangeError,
    Tensor,
    conv2d,
    masked_cross_entropy,
    no_grad,
    relu,
    slice_batch,
    softmax_array,
    softmax_channels,
)

__all__ = [
    "DimensionError", "LabelRangeError", "OptimizerState", "SegModel", "Tensor", "conv2d",
    "forward_array", "masked_cross_entropy", "no_grad", "poly_lr", "predict_probs", "relu",
    "sgd_step", "slice_batch", "softmax_array", "softmax_channels",
]
