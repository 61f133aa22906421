from .gradcheck import GradcheckReport, gradcheck, gradcheck_report, relative_error
from .ops import (
    add,
    batchnorm2d,
    conv2d,
    conv2d_transpose,
    dense,
    dropout,
    flatten,
    leaky_relu,
    maxpool2d,
    reshape,
    same_padding,
    sigmoid,
    weighted_sum,
)
from .tape import Parameter, Tape, Tensor, as_tensor, current_tape, record

__all__ = [
    "Parameter", "Tape", "Tensor", "add", "as_tensor", "batchnorm2d", "conv2d",
    "conv2d_transpose", "current_tape", "dense", "dropout", "flatten", "gradcheck", "gradcheck_report", "GradcheckReport",
    "leaky_relu", "maxpool2d", "record", "relative_error", "reshape", "same_padding",
    "sigmoid", "weighted_sum",
]
