"""Minimal float64 tensor engine: autodiff, fused ops, Adam, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    dropout,
    gelu,
    layer_norm,
    linear,
    masked_fill,
    relu,
    scaled_dot_attention,
    sigmoid_bce_with_logits,
    softmax,
)
from .gradcheck import check_gradients
from .optim import AdamState, adam_step, clip_global_grad_norm, global_grad_norm
from .tensor import DTYPE, Tensor, concat, gather_rows, matmul, no_grad, ones, stack, tensor, where, zeros

__all__ = [
    "DTYPE", "Tensor", "no_grad", "tensor", "zeros", "ones", "matmul", "concat", "stack", "where", "gather_rows",
    "softmax", "layer_norm", "gelu", "relu", "linear", "masked_fill", "dropout", "scaled_dot_attention", "sigmoid_bce_with_logits",
    "AdamState", "adam_step", "clip_global_grad_norm", "global_grad_norm", "check_gradients",
    "save_checkpoint", "load_checkpoint",
]
