"""Differentiable primitives.

Each function computes a forward value with numpy and registers the matching
backward rule on the tape. Broadcasting follows numpy semantics for the
elementwise ops; gradients are summed back to the operand shape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateInputError, ShapeError
from .tensor import Tensor, as_tensor, make


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-softplus(-x)) keeps full relative precision in both tails
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.asarray(out, dtype=a.dtype), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise selection ``a[i, index[i]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick needs (B, K) values and (B,) indices, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return make(a.data[rows, index], (a,), back)


# ---------------------------------------------------------------- softmax family

def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return make(out, (a,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return neg(mean(pick(log_softmax(logits), labels)))


# ---------------------------------------------------------------- similarity

def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; leading axes are batch axes."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine similarity needs equal shapes, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    s = dot / (na * nb)

    def back(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - s * a.data / na**2)
        gb = g * (a.data / (na * nb) - s * b.data / nb**2)
        return ga, gb

    return make(np.clip(s[..., 0], -1.0, 1.0), (a, b), back)


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is (B, Cin, H, W); ``weight`` is (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    B, cin, H, W = x.shape
    cout, _, kh, kw = weight.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
    """Batch normalization over every axis except the channel axis 1.

    Returns ``(out, batch_mean, batch_var)``; the batch statistics (the
    variance unbiased) are ``None`` in inference mode. Updating running
    statistics is the caller's job.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} with affine shapes {gamma.shape}, {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * invstd
        out = g_ * xhat + beta.data.reshape(bshape)

        def back(g):
            dxhat = g * g_
            dx = invstd / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        return make(out, (x, gamma, beta), back), mu.reshape(-1), unbiased
    if running_mean is None or running_var is None:
        raise ShapeError("batch_norm: inference mode needs running statistics")
    invstd = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
    xhat = (x.data - running_mean.reshape(bshape)) * invstd
    out = g_ * xhat + beta.data.reshape(bshape)

    def back_eval(g):
        return g * g_ * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(out.astype(x.dtype), (x, gamma, beta), back_eval), None, None


# ---------------------------------------------------------------- pooling

def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling with a square window."""
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ShapeError(f"avg_pool2d: spatial size {H}x{W} not divisible by {kernel}")
    out = x.data.reshape(B, C, H // kernel, kernel, W // kernel, kernel).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel),)

    return make(out, (x,), back)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C), the mean over the spatial grid."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool2d expects 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return make(x.data.mean(axis=(2, 3)), (x,),
                lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))
