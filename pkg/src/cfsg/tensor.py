"""Layer kernels with hand-derived gradients.

Every array here is a ``numpy.ndarray`` in (N, C, H, W) layout. The
network runs everything in float32; ops preserve the input dtype so the
gradient checks can run in float64.

Convolutions are 3x3, stride 1, zero padding 1. Max pooling is 2x2 with
the argmax position of every window kept as a window-local offset
(0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right) so the
decoder can scatter values back with :func:`max_unpool_2x2`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when an operand has the wrong shape for an op."""

    def __init__(self, op: str, dimension: str, expected, got):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dimension} mismatch (expected {expected}, got {got})")


class IndexCorruptionError(ValueError):
    """Raised when pooling indices point outside their 2x2 window."""


def _check_4d(op: str, name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(op, f"{name} rank", 4, x.ndim)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*W) patch matrix for a zero-padded 3x3 window.

    Rows are ordered (channel, dy, dx) to match ``weights.reshape(Cout, -1)``.
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, n, h, w), dtype=x.dtype)
    for t in range(9):
        dy, dx = divmod(t, 3)
        cols[:, t] = xp[:, :, dy:dy + h, dx:dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None) -> None:
    _check_4d("conv2d", "input", x)
    _check_4d("conv2d", "weights", weights)
    if weights.shape[2:] != (3, 3):
        raise ShapeError("conv2d", "kernel size", (3, 3), weights.shape[2:])
    if weights.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", "input channels", weights.shape[1], x.shape[1])
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError("conv2d", "bias length", (weights.shape[0],), bias.shape)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None,
           method: str = "gemm") -> np.ndarray:
    """3x3 same-size convolution (cross-correlation, as in every DL framework).

    ``method="direct"`` accumulates one tap at a time and serves as the
    reference path; ``method="gemm"`` lowers to a single matrix product over
    an im2col patch matrix. Both agree to within 1e-5.
    """
    _check_conv(x, weights, bias)
    n, _, h, w = x.shape
    cout = weights.shape[0]
    if method == "direct":
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((n, cout, h, w), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                tap = xp[:, :, dy:dy + h, dx:dx + w]
                out += np.einsum("oc,nchw->nohw", weights[:, :, dy, dx], tap)
    elif method == "gemm":
        out = weights.reshape(cout, -1).astype(x.dtype, copy=False) @ _im2col(x)
        out = out.reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_grad(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
                need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false (first layer of a network).
    """
    _check_conv(x, weights, None)
    n, cin, h, w = x.shape
    cout = weights.shape[0]
    if upstream.shape != (n, cout, h, w):
        raise ShapeError("conv2d_grad", "upstream shape", (n, cout, h, w), upstream.shape)
    g = upstream.transpose(1, 0, 2, 3).reshape(cout, -1)
    grad_w = (g @ _im2col(x).T).reshape(weights.shape)
    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        # full correlation == same convolution with the flipped, transposed kernel
        flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = conv2d(upstream, flipped)
    return grad_x, grad_w.astype(x.dtype), grad_b.astype(x.dtype)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, DTYPE),
            beta=np.zeros(channels, DTYPE),
            running_mean=np.zeros(channels, DTYPE),
            running_var=np.ones(channels, DTYPE),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_check(x: np.ndarray, state: BatchNormState) -> None:
    _check_4d("batch_norm", "input", x)
    if x.shape[1] != state.channels:
        raise ShapeError("batch_norm", "channels", state.channels, x.shape[1])


def batch_norm(x: np.ndarray, state: BatchNormState, mode: str = "train") -> np.ndarray:
    """Per-channel normalisation over (N, H, W).

    In ``train`` mode the batch statistics are used and the running
    statistics are updated in place with an exponential moving average
    (``running = momentum * running + (1 - momentum) * batch``).
    """
    _bn_check(x, state)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    elif mode == "infer":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    dt = x.dtype
    scale = (state.gamma / np.sqrt(var + state.epsilon)).astype(dt)
    centred = x - mean.astype(dt)[None, :, None, None]
    out = centred * scale[None, :, None, None] + state.beta.astype(dt)[None, :, None, None]
    return out.astype(dt, copy=False)


def batch_norm_grad(x: np.ndarray, state: BatchNormState, upstream: np.ndarray):
    """Train-mode gradient: returns ``(grad_input, grad_gamma, grad_beta)``."""
    _bn_check(x, state)
    if upstream.shape != x.shape:
        raise ShapeError("batch_norm_grad", "upstream shape", x.shape, upstream.shape)
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=axes, dtype=np.float64)
    var = x.var(axis=axes, dtype=np.float64)
    dt = x.dtype
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(dt)
    xhat = (x - mean.astype(dt)[None, :, None, None]) * inv_std[None, :, None, None]
    grad_beta = upstream.sum(axis=axes, dtype=np.float64)
    grad_gamma = (upstream * xhat).sum(axis=axes, dtype=np.float64)
    coef = (state.gamma * inv_std / count).astype(dt)
    grad_x = coef[None, :, None, None] * (
        count * upstream
        - grad_beta.astype(dt)[None, :, None, None]
        - xhat * grad_gamma.astype(dt)[None, :, None, None]
    )
    gdt = state.gamma.dtype
    return grad_x.astype(dt), grad_gamma.astype(gdt), grad_beta.astype(gdt)


# ---------------------------------------------------------------------------
# elementwise / pooling / misc


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def _windows(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C, H/2, W/2, 4) with row-major window order."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)


def max_pool_2x2(x: np.ndarray):
    """2x2 max pooling. Returns ``(values, indices)``.

    ``indices`` is a uint8 array holding, per output cell, the window-local
    offset of the maximum. Ties go to the first maximum in row-major order.
    """
    _check_4d("max_pool_2x2", "input", x)
    if x.shape[2] % 2:
        raise ShapeError("max_pool_2x2", "height parity", "even", x.shape[2])
    if x.shape[3] % 2:
        raise ShapeError("max_pool_2x2", "width parity", "even", x.shape[3])
    win = _windows(x)
    idx = win.argmax(axis=-1).astype(np.uint8)  # argmax returns first maximum
    values = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(values), idx


def _check_indices(op: str, values: np.ndarray, indices: np.ndarray) -> None:
    _check_4d(op, "values", values)
    if indices.shape != values.shape:
        raise ShapeError(op, "indices shape", values.shape, indices.shape)
    if indices.size and int(indices.max()) > 3:
        raise IndexCorruptionError(f"{op}: pooling offset {int(indices.max())} is outside its 2x2 window")


def max_unpool_2x2(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Scatter each value to its recorded offset in a doubled-size zero map."""
    _check_indices("max_unpool_2x2", values, indices)
    n, c, h, w = values.shape
    onehot = indices[..., None] == np.arange(4, dtype=np.uint8)
    win = np.where(onehot, values[..., None], 0).astype(values.dtype)
    return np.ascontiguousarray(
        win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w))


def max_unpool_2x2_grad(upstream: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Gradient of unpooling w.r.t. its values: gather at the recorded offsets."""
    n, c, h, w = indices.shape
    if upstream.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError("max_unpool_2x2_grad", "upstream shape", (n, c, 2 * h, 2 * w), upstream.shape)
    _check_indices("max_unpool_2x2_grad", indices.astype(upstream.dtype), indices)
    win = _windows(upstream)
    return np.ascontiguousarray(
        np.take_along_axis(win, indices[..., None].astype(np.intp), axis=-1)[..., 0])


def max_pool_2x2_grad(upstream: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Gradient of max pooling routes to the argmax, i.e. it is an unpool."""
    return max_unpool_2x2(upstream, indices)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_4d("concat_channels", "a", a)
    _check_4d("concat_channels", "b", b)
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError("concat_channels", name, a.shape[axis], b.shape[axis])
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, channels_a: int):
    """Gradient of :func:`concat_channels`: split back into the two operands."""
    return grad[:, :channels_a], grad[:, channels_a:]


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
