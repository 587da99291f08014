"""Minimal numpy tensor library with reverse-mode autodiff."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import ParamStore, multi_head_attention
from .optim import adamw_step, grad_check, grad_check_params
from .tensor import (
    Tensor,
    attention_core,
    concat,
    conv1d,
    embedding,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    softmax,
)

__all__ = [
    "ParamStore",
    "Tensor",
    "adamw_step",
    "attention_core",
    "concat",
    "conv1d",
    "embedding",
    "gelu",
    "grad_check",
    "grad_check_params",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "save_checkpoint",
    "softmax",
]
