"""
Layer kernels as explicit numpy forward/backward pairs

Every `*_forward` returns `(out, cache)` and the matching `*_backward(grad_out, cache)`
returns gradients in argument order. The lowercase wrappers at the bottom lift them onto
`Tensor` so the graph can chain them.

Layouts follow (batch, channels, length) for sequences and (batch, features) for vectors.
"""
from typing import Optional, Tuple

import numpy as np

from .. import InputShapeError
from .tensor import Tensor

L2_EPS = 1e-12


# convolution, stride 1, zero padding, via im2col


def _im2col(x: np.ndarray, kernel: int, padding: int) -> np.ndarray:
    n, c, length = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    out_len = length + 2 * padding - kernel + 1
    idx = np.arange(out_len)[:, None] + np.arange(kernel)[None, :]
    # (n, c, out_len, k) -> (n, out_len, c * k)
    cols = xp[:, :, idx]
    return cols.transpose(0, 2, 1, 3).reshape(n, out_len, c * kernel)


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int = 1):
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise InputShapeError(f"conv1d expects (N, {w.shape[1]}, L), got {x.shape}")
    out_ch, in_ch, kernel = w.shape
    cols = _im2col(x, kernel, padding)
    out = cols @ w.reshape(out_ch, in_ch * kernel).T + b
    return out.transpose(0, 2, 1), (x.shape, cols, w, padding)


def conv1d_backward(grad: np.ndarray, cache, need_input: bool = True):
    x_shape, cols, w, padding = cache
    n, in_ch, length = x_shape
    out_ch, _, kernel = w.shape
    g = grad.transpose(0, 2, 1)  # (n, out_len, out_ch)
    dw = np.einsum("nlo,nlk->ok", g, cols).reshape(w.shape)
    db = g.sum(axis=(0, 1))
    if not need_input:
        return None, dw, db
    dcols = (g @ w.reshape(out_ch, in_ch * kernel)).reshape(n, -1, in_ch, kernel)
    out_len = dcols.shape[1]
    dxp = np.zeros((n, in_ch, length + 2 * padding), dtype=grad.dtype)
    for k in range(kernel):
        dxp[:, :, k : k + out_len] += dcols[:, :, :, k].transpose(0, 2, 1)
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return dx, dw, db


# batch normalisation over every axis except channels


def _bn_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0,) if x.ndim == 2 else (0, 2)


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1)


def batch_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Normalise per channel; in training the running buffers are updated in place"""
    axes = _bn_axes(x)
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise InputShapeError("Batch normalisation in training needs more than one value per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = x_hat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return out.astype(x.dtype, copy=False), (x_hat, inv_std, gamma, training, axes)


def batch_norm_backward(grad: np.ndarray, cache):
    x_hat, inv_std, gamma, training, axes = cache
    dgamma = (grad * x_hat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dx_hat = grad * _bn_view(gamma, grad.ndim)
    if training:
        dx = (
            dx_hat
            - dx_hat.mean(axis=axes, keepdims=True)
            - x_hat * (dx_hat * x_hat).mean(axis=axes, keepdims=True)
        ) * _bn_view(inv_std, grad.ndim)
    else:
        dx = dx_hat * _bn_view(inv_std, grad.ndim)
    return dx.astype(grad.dtype, copy=False), dgamma, dbeta


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad: np.ndarray, mask):
    return (grad * mask,)


def max_pool1d_forward(x: np.ndarray, kernel: int = 2):
    """Non-overlapping max over windows of `kernel`; a ragged tail is dropped"""
    n, c, length = x.shape
    out_len = length // kernel
    if out_len == 0:
        raise InputShapeError(f"Cannot pool length {length} by {kernel}")
    windows = x[:, :, : out_len * kernel].reshape(n, c, out_len, kernel)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]
    return out, (x.shape, idx, kernel)


def max_pool1d_backward(grad: np.ndarray, cache):
    x_shape, idx, kernel = cache
    n, c, out_len = grad.shape
    dwin = np.zeros((n, c, out_len, kernel), dtype=grad.dtype)
    np.put_along_axis(dwin, idx, grad[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=grad.dtype)
    dx[:, :, : out_len * kernel] = dwin.reshape(n, c, out_len * kernel)
    return (dx,)


def _adaptive_bounds(length: int, output_size: int):
    starts = (np.arange(output_size) * length) // output_size
    ends = -((-(np.arange(output_size) + 1) * length) // output_size)
    return starts, ends


def adaptive_avg_pool1d_forward(x: np.ndarray, output_size: int = 1):
    """Average over `output_size` near-equal, possibly overlapping bins of the length axis"""
    length = x.shape[-1]
    starts, ends = _adaptive_bounds(length, output_size)
    out = np.stack([x[..., s:e].mean(axis=-1) for s, e in zip(starts, ends)], axis=-1)
    return out, (x.shape, starts, ends)


def adaptive_avg_pool1d_backward(grad: np.ndarray, cache):
    x_shape, starts, ends = cache
    dx = np.zeros(x_shape, dtype=grad.dtype)
    for i, (s, e) in enumerate(zip(starts, ends)):
        dx[..., s:e] += grad[..., i : i + 1] / (e - s)
    return (dx,)


def linear_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InputShapeError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_backward(grad: np.ndarray, cache, need_input: bool = True):
    x, w = cache
    dx = grad @ w if need_input else None
    return dx, grad.T @ x, grad.sum(axis=0)


def l2_normalize_forward(x: np.ndarray, eps: float = L2_EPS):
    """Row-wise x / max(||x||, eps)"""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x / denom
    return y, (y, denom, norms > eps)


def l2_normalize_backward(grad: np.ndarray, cache):
    y, denom, active = cache
    projected = grad - y * (grad * y).sum(axis=1, keepdims=True)
    return (np.where(active, projected, grad) / denom,)


# Tensor-level ops


def conv1d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    out, cache = conv1d_forward(x.data, w.data, b.data, padding)
    need_input = x.requires_grad
    return Tensor.from_op(out, (x, w, b), lambda g: conv1d_backward(g, cache, need_input), "conv1d")


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
    out, cache = batch_norm_forward(x.data, gamma.data, beta.data, running_mean, running_var, training, momentum, eps)
    return Tensor.from_op(out, (x, gamma, beta), lambda g: batch_norm_backward(g, cache), "batch_norm")


def relu(x: Tensor) -> Tensor:
    out, mask = relu_forward(x.data)
    return Tensor.from_op(out, (x,), lambda g: relu_backward(g, mask), "relu")


def max_pool1d(x: Tensor, kernel: int = 2) -> Tensor:
    out, cache = max_pool1d_forward(x.data, kernel)
    return Tensor.from_op(out, (x,), lambda g: max_pool1d_backward(g, cache), "max_pool1d")


def adaptive_avg_pool1d(x: Tensor, output_size: int = 1) -> Tensor:
    out, cache = adaptive_avg_pool1d_forward(x.data, output_size)
    return Tensor.from_op(out, (x,), lambda g: adaptive_avg_pool1d_backward(g, cache), "adaptive_avg_pool1d")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out, cache = linear_forward(x.data, w.data, None if b is None else b.data)
    need_input = x.requires_grad
    if b is None:
        return Tensor.from_op(out, (x, w), lambda g: linear_backward(g, cache, need_input)[:2], "linear")
    return Tensor.from_op(out, (x, w, b), lambda g: linear_backward(g, cache, need_input), "linear")


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    out, cache = l2_normalize_forward(x.data, eps)
    return Tensor.from_op(out, (x,), lambda g: l2_normalize_backward(g, cache), "l2_normalize")
