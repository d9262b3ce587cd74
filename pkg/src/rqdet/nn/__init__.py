"""Minimal dense-tensor engine with reverse-mode autodiff."""
from . import ops
from .ops import (bilinear_sample, concat, conv2d, layer_norm, linear, matmul, relu, reshape,
                  sigmoid, sigmoid_focal_loss, softmax, stack, transpose)
from .optim import AdamW, adamw_step, clip_grad_norm, lr_at
from .params import ParamStore
from .tensor import (GradTape, MissingGrad, NotScalar, Parameter, ShapeMismatch, Tensor,
                     TapeConsumed, as_tensor, backward, current_tape, detach, get_default_dtype,
                     no_grad, record, record_detached, replay_detached, reset_tape,
                     set_default_dtype)

__all__ = [
    "ops", "Tensor", "Parameter", "GradTape", "ParamStore", "AdamW", "adamw_step", "lr_at",
    "clip_grad_norm", "backward", "detach", "no_grad", "record", "as_tensor", "current_tape",
    "reset_tape", "record_detached", "replay_detached", "set_default_dtype", "get_default_dtype",
    "ShapeMismatch", "NotScalar", "TapeConsumed", "MissingGrad", "matmul", "linear", "concat",
    "stack", "reshape", "transpose", "relu", "sigmoid", "softmax", "layer_norm",
    "bilinear_sample", "conv2d", "sigmoid_focal_loss",
]
