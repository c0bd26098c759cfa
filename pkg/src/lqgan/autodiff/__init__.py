from lqgan.autodiff.checkpoint import load_checkpoint, save_checkpoint
from lqgan.autodiff.functional import batch_norm, conv2d, conv_transpose2d, dropout, linear, mse
from lqgan.autodiff.init import lecun_normal
from lqgan.autodiff.optim import Adam, AdamState, adam_step, clip_global_norm, global_norm
from lqgan.autodiff.tensor import Function, Tensor, concatenate, enable_grad, grad, no_grad, tensor

__all__ = [
    "Adam",
    "AdamState",
    "Function",
    "Tensor",
    "adam_step",
    "batch_norm",
    "clip_global_norm",
    "concatenate",
    "conv2d",
    "conv_transpose2d",
    "dropout",
    "enable_grad",
    "global_norm",
    "grad",
    "lecun_normal",
    "linear",
    "load_checkpoint",
    "mse",
    "no_grad",
    "save_checkpoint",
    "tensor",
]
