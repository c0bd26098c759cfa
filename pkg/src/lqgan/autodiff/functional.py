"""Composite layers built from Tensor primitives."""

from __future__ import annotations

import numpy as np

from lqgan.autodiff.tensor import Col2Im, Im2Col, Tensor, conv_out_size
from lqgan.errors import ShapeError


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}",
            op="linear",
            shapes=[list(x.shape), list(weight.shape)],
        )
    out = x @ weight
    return out + bias if bias is not None else out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution; ``weight`` is (out_channels, in_channels, k, k)."""
    n, c, h, w = x.shape
    oc, ic, k, k2 = weight.shape
    if ic != c or k != k2:
        raise ShapeError("conv2d channel/kernel mismatch", op="conv2d", shapes=[list(x.shape), list(weight.shape)])
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    cols = Im2Col.apply(x, kernel=k, stride=stride, padding=padding)
    out = weight.reshape(oc, ic * k * k) @ cols
    out = out.reshape(n, oc, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, oc, 1, 1)
    return out


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is (in_channels, out_channels, k, k)."""
    n, c, h, w = x.shape
    ic, oc, k, k2 = weight.shape
    if ic != c or k != k2:
        raise ShapeError(
            "conv_transpose2d channel/kernel mismatch", op="conv_transpose2d", shapes=[list(x.shape), list(weight.shape)]
        )
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    cols = weight.reshape(ic, oc * k * k).T @ x.reshape(n, c, h * w)
    out = Col2Im.apply(cols, image_shape=(oc, ho, wo), kernel=k, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, oc, 1, 1)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except 1 (channels/features).

    In training mode the running statistics are updated in place.
    """
    axes = tuple(a for a in range(x.ndim) if a != 1)
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    shape = tuple(shape)
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        n = x.size // x.shape[1]
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        xhat = centered / (var + eps).sqrt()
    else:
        mu = Tensor(running_mean.reshape(shape).astype(x.dtype))
        inv = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(x.dtype))
        xhat = (x - mu) * inv
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def mse(a: Tensor, b) -> Tensor:
    d = a - b
    return (d * d).mean()
