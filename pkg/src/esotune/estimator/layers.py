"""Differentiable building blocks for the performance estimator.

Every layer is a pair of pure functions: ``*_forward`` returns the output
plus whatever the matching ``*_backward`` needs to produce gradients.
All arithmetic is float64 and single threaded apart from whatever BLAS
does inside the matrix products.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "conv1d_forward",
    "conv1d_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "dense_forward",
    "dense_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid_forward",
    "sigmoid_backward",
]

# Sigmoid outputs are clamped this far inside (0, 1) so the documented
# open-interval range holds even when a pre-activation saturates in
# float64 (exp(-x) underflows for x > ~37).
_SIGMOID_MARGIN = 1e-15


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """Unfold a padded (batch, channels, length) tensor for a same-pad conv.

    Returns (batch, length, channels * kernel) where ``length`` is the
    unpadded length, laid out so that a row-major reshape of the weight
    tensor (out, in, kernel) lines up with the last axis.
    """
    pad = (kernel - 1) // 2
    batch, channels, length = x.shape
    xp = np.zeros((batch, channels, length + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + length] = x
    cols = np.empty((batch, channels, kernel, length), dtype=np.float64)
    for i in range(kernel):
        cols[:, :, i, :] = xp[:, :, i:i + length]
    return cols.transpose(0, 3, 1, 2).reshape(batch, length, channels * kernel)


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padding 1-D convolution.

    x: (batch, in_channels, length)
    w: (out_channels, in_channels, kernel), kernel odd
    b: (out_channels,)
    Returns (batch, out_channels, length) and a cache for the backward pass.
    """
    out_channels, in_channels, kernel = w.shape
    if kernel % 2 != 1:
        raise ValueError("conv kernel must be odd for same padding")
    if x.shape[1] != in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, weights expect {in_channels}"
        )
    cols = _im2col(x, kernel)
    wmat = w.reshape(out_channels, in_channels * kernel)
    y = cols @ wmat.T + b
    cache = (cols, w, x.shape)
    return y.transpose(0, 2, 1), cache


def conv1d_backward(dy: np.ndarray, cache):
    """Gradients of conv1d_forward. dy: (batch, out_channels, length)."""
    cols, w, x_shape = cache
    out_channels, in_channels, kernel = w.shape
    batch, _, length = x_shape
    dyt = dy.transpose(0, 2, 1).reshape(batch * length, out_channels)
    cols_flat = cols.reshape(batch * length, in_channels * kernel)
    dw = (dyt.T @ cols_flat).reshape(out_channels, in_channels, kernel)
    db = dyt.sum(axis=0)
    dcols = (dyt @ w.reshape(out_channels, -1)).reshape(
        batch, length, in_channels, kernel
    ).transpose(0, 2, 3, 1)
    pad = (kernel - 1) // 2
    dxp = np.zeros((batch, in_channels, length + 2 * pad), dtype=np.float64)
    for i in range(kernel):
        dxp[:, :, i:i + length] += dcols[:, :, i, :]
    dx = dxp[:, :, pad:pad + length]
    return dx, dw, db


def maxpool2_forward(x: np.ndarray):
    """Width-2 stride-2 max pool over the last axis.

    An odd trailing element is dropped, so the output length is
    ``floor(length / 2)``. Ties go to the earlier element, which keeps the
    backward pass deterministic.
    """
    length = x.shape[-1]
    out_len = length // 2
    if out_len < 1:
        raise ValueError("maxpool input is too short")
    a = x[..., 0:2 * out_len:2]
    b = x[..., 1:2 * out_len:2]
    first_wins = a >= b
    y = np.where(first_wins, a, b)
    return y, (first_wins, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    first_wins, x_shape = cache
    out_len = dy.shape[-1]
    dx = np.zeros(x_shape, dtype=np.float64)
    dx[..., 0:2 * out_len:2] = np.where(first_wins, dy, 0.0)
    dx[..., 1:2 * out_len:2] = np.where(first_wins, 0.0, dy)
    return dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine layer. x: (batch, n_in), w: (n_in, n_out), b: (n_out,)."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"dense input width {x.shape[1]} != {w.shape[0]}")
    y = x @ w + b
    return y, (x, w)


def dense_backward(dy: np.ndarray, cache):
    x, w = cache
    dw = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def relu_forward(x: np.ndarray):
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray):
    return np.where(mask, dy, 0.0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    pos = x >= 0.0
    z = np.exp(np.where(pos, -x, x))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return np.clip(s, _SIGMOID_MARGIN, 1.0 - _SIGMOID_MARGIN)


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)
