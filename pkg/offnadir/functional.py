"""
Differentiable layer operations on :class:`offnadir.tensor.Tensor`.

All image tensors are laid out as ``[N, C, H, W]``.
"""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng, ShapeError, Tensor

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
BN_MODES = ("train", "eval")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """
    Output length of a convolution along one axis.

    Raises
    ------
    ShapeError
        If the kernel does not tile the padded input exactly.
    """
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"Convolution does not divide exactly: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2D cross-correlation with zero padding.

    Parameters
    ----------
    x : Tensor
        Input of shape ``[N, C, H, W]``.
    weight : Tensor
        Kernel of shape ``[K, C, kh, kw]``.
    bias : Tensor, optional
        Shape ``[K]``.
    stride : int, optional
    padding : int, optional
        Zero padding applied to both sides of each spatial axis.

    Returns
    -------
    Tensor
        Shape ``[N, K, H', W']`` with ``H' = (H + 2 padding - kh) / stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape}, {weight.shape}")
    n, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = weight.shape
    if kernel_channels != channels:
        raise ShapeError(
            f"conv2d: kernel expects {kernel_channels} channels, input has {channels}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({out_channels},)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")

    out_h = conv_output_size(height, kh, stride, padding)
    out_w = conv_output_size(width, kw, stride, padding)

    if padding:
        pad = (padding, padding)
        padded = np.pad(x.data, ((0, 0), (0, 0), pad, pad))
    else:
        padded = x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    kernel = weight.data
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        grad_weight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        columns = np.tensordot(g, kernel, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += columns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        else:
            grad_x = grad_padded
        if bias is None:
            return grad_x, grad_weight
        return grad_x, grad_weight, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def interpolation_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """
    Linear interpolation weights with the align-corners-false convention.

    Output sample ``i`` reads the input at ``(i + 0.5) * in / out - 0.5``,
    clamped to the valid range.

    Returns
    -------
    np.ndarray
        Shape ``[out_size, in_size]``; every row sums to one.
    """
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        source = max((i + 0.5) * scale - 0.5, 0.0)
        lower = min(int(np.floor(source)), in_size - 1)
        upper = min(lower + 1, in_size - 1)
        frac = source - lower if upper != lower else 0.0
        matrix[i, lower] += 1.0 - frac
        matrix[i, upper] += frac
    return matrix.astype(dtype)


def resize_bilinear(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes of a plain array (no gradient)."""
    rows = interpolation_matrix(array.shape[-2], height, dtype=np.float64)
    cols = interpolation_matrix(array.shape[-1], width, dtype=np.float64)
    return (rows @ array.astype(np.float64) @ cols.T).astype(array.dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample ``[N, C, H, W]`` by an integer ``factor`` >= 2."""
    if not isinstance(factor, (int, np.integer)) or factor < 2:
        raise ValueError(f"Upsampling factor must be an integer >= 2, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects a 4D input, got {x.shape}")

    _, _, height, width = x.shape
    rows = interpolation_matrix(height, height * factor, dtype=x.dtype)
    cols = interpolation_matrix(width, width * factor, dtype=x.dtype)
    out = rows @ x.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)

    return Tensor.from_op(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """
    Per-channel batch normalization.

    In ``train`` mode the batch statistics (variance with denominator
    ``N*H*W``) normalize the input, and ``running_mean`` / ``running_var`` are
    updated in place with ``momentum`` (the running variance uses the
    unbiased estimate).  In ``eval`` mode the running statistics are used.
    """
    if mode not in BN_MODES:
        raise ValueError(f"Batch norm mode must be one of {BN_MODES}, got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4D input, got {x.shape}")
    n, channels, height, width = x.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not "
            f"match {channels} channels"
        )

    axes = (0, 2, 3)
    count = n * height * width
    gamma_b = gamma.data[None, :, None, None]

    if mode == "train":
        if count < 2:
            raise ValueError(
                f"batch_norm in train mode needs N*H*W >= 2 per channel, got {count}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x.data - mean[None, :, None, None].astype(x.dtype)) * inv_std[
        None, :, None, None
    ]
    out = gamma_b * x_hat + beta.data[None, :, None, None]

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_x_hat = g * gamma_b
        if mode == "train":
            grad_x = (inv_std[None, :, None, None] / count) * (
                count * grad_x_hat
                - grad_x_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_x_hat * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: Optional[Rng], active: bool) -> Tensor:
    """
    Inverted dropout: zero each element with probability ``rate`` and scale
    the survivors by ``1 / (1 - rate)``.  Inactive dropout is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("Active dropout needs an Rng")

    keep = rng.uniform(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor.from_op(
        np.where(positive, x.data, 0).astype(x.dtype), (x,), lambda g: (g * positive,)
    )


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_array(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),))


def sigmoid_array(values: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    decay = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(
        values.dtype
    )


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N, Din]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2D input and weight, got {x.shape}, {weight.shape}")
    out_features, in_features = weight.shape
    if x.shape[1] != in_features:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {in_features}")
    if bias is not None and bias.shape != (out_features,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({out_features},)")

    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data[None, :]

    def backward(g):
        grads = (g @ w_data, g.T @ x_data)
        if bias is None:
            return grads
        return grads + (g.sum(axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out.astype(x.dtype), parents, backward)


def repeat_spatial(vectors: Tensor, height: int, width: int) -> Tensor:
    """Tile ``[N, D]`` vectors over space into ``[N, D, height, width]``."""
    if vectors.ndim != 2:
        raise ShapeError(f"repeat_spatial expects [N, D], got {vectors.shape}")
    n, depth = vectors.shape
    out = np.broadcast_to(vectors.data[:, :, None, None], (n, depth, height, width))
    return Tensor.from_op(
        np.ascontiguousarray(out), (vectors,), lambda g: (g.sum(axis=(2, 3)),)
    )
