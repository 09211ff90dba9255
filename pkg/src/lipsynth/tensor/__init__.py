"""numpy-backed tensors with reverse-mode autodiff and layer primitives."""

from .archive import load_archive, save_archive
from .core import Tensor, backward, grad_enabled, no_grad, trace, zero_grads
from .gradcheck import gradient_check
from .init import TANH_GAIN, fan_in_out, ones, xavier_uniform, zeros
from .ops import (
    activation,
    add,
    batchnorm,
    concat,
    conv1d,
    conv3d,
    conv_out_len,
    dropout,
    linear,
    lstm_cell,
    matmul,
    maxpool3d,
    mean,
    mse,
    mul,
    narrow,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "Tensor", "backward", "no_grad", "grad_enabled", "trace", "zero_grads",
    "gradient_check", "save_archive", "load_archive",
    "xavier_uniform", "zeros", "ones", "fan_in_out", "TANH_GAIN",
    "add", "sub", "neg", "mul", "scale", "sum_", "mean", "mse",
    "reshape", "transpose", "concat", "narrow",
    "matmul", "linear", "relu", "tanh", "sigmoid", "softmax", "activation",
    "dropout", "conv3d", "conv1d", "conv_out_len", "maxpool3d", "batchnorm",
    "lstm_cell",
]
