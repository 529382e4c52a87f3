"""Forward and backward kernels of the network layers.

Tensors are plain numpy arrays in (batch, channels, height, width) layout.
Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""

from __future__ import annotations

import typing as t

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from symmetry_cad.exceptions import NonFiniteError, ShapeMismatchError

PROB_FLOOR = 1e-12


def check_finite(where: str, array: np.ndarray) -> np.ndarray:
    """Return ``array`` unchanged, or raise if it holds NaN/Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(where)
    return array


def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype=np.float64
) -> np.ndarray:
    """Samples of U[-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype, copy=False)


# convolution


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Valid, stride-1 cross-correlation.

    Args:
        x: Input of shape (N, C, H, W).
        weights: Kernels of shape (F, C, k, k).
        bias: Shape (F,).
    """
    n_filters, channels, kh, kw = weights.shape
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(f"conv2d: input {x.shape} incompatible with weights {weights.shape}")
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeMismatchError(f"conv2d: input {x.shape[2:]} smaller than kernel {(kh, kw)}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", windows, weights, optimize=True)
    out += bias[None, :, None, None]
    return out, (x, weights)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x, weights = cache
    kh, kw = weights.shape[2:]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    dweights = np.einsum("nfhw,nchwij->fcij", dout, windows, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    dwindows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    dx = np.einsum("nfhwij,fcij->nchw", dwindows, weights[:, :, ::-1, ::-1], optimize=True)
    return dx, dweights, dbias


# pooling


def pool_output_size(size: int, window: int, stride: int) -> int:
    """Output extent of a valid pooling: floor((size - window) / stride) + 1."""
    return (size - window) // stride + 1


def maxpool_forward(x: np.ndarray, window: int = 3, stride: int = 2) -> tuple[np.ndarray, tuple]:
    """Max pooling over ``window`` x ``window`` blocks.

    Ties resolve to the first element of the window in row-major order.
    """
    if x.shape[2] < window or x.shape[3] < window:
        raise ShapeMismatchError(f"maxpool: input {x.shape[2:]} smaller than window {window}")
    windows = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(*windows.shape[:4], window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax, window, stride)


def maxpool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    """Route each output gradient to the input position that won its window."""
    shape, argmax, window, stride = cache
    n, c, oh, ow = argmax.shape
    rows = np.arange(oh)[None, None, :, None] * stride + argmax // window
    cols = np.arange(ow)[None, None, None, :] * stride + argmax % window
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], argmax.shape)
    cc = np.broadcast_to(np.arange(c)[None, :, None, None], argmax.shape)
    dx = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dx, (nn, cc, rows, cols), dout)
    return dx


# global average pooling


def gap_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3)), (x.shape,)


def gap_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    (shape,) = cache
    height, width = shape[2:]
    return np.broadcast_to(dout[:, :, None, None] / (height * width), shape).copy()


# dense and activations


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Affine map ``x @ weights + bias`` with weights of shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatchError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    return x @ weights + bias, (x, weights)


def dense_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weights = cache
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    return np.maximum(x, 0), (x > 0,)


def relu_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    (mask,) = cache
    return dout * mask


def dropout_forward(
    x: np.ndarray, rate: float, *, training: bool, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, tuple]:
    """Inverted dropout; identity outside training."""
    if not training or rate == 0.0:
        return x, (None,)
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, (mask,)


def dropout_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    (mask,) = cache
    return dout if mask is None else dout * mask


def softmax_forward(logits: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs, (probs,)


def softmax_backward(dprobs: np.ndarray, cache: tuple) -> np.ndarray:
    (probs,) = cache
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


def cross_entropy_forward(probs: np.ndarray, labels: np.ndarray) -> tuple[float, tuple]:
    """Mean of -log p(true class), with probabilities clamped at ``PROB_FLOOR``."""
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(len(labels)), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    return float(-np.log(clamped).mean()), (probs.shape, labels, clamped, picked >= PROB_FLOOR)


def cross_entropy_backward(cache: tuple) -> np.ndarray:
    shape, labels, clamped, active = cache
    dprobs = np.zeros(shape)
    rows = np.arange(len(labels))
    dprobs[rows, labels] = -active.astype(float) / (clamped * len(labels))
    return dprobs


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the logits: (p - onehot) / N."""
    labels = np.asarray(labels, dtype=np.intp)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


class Layer(t.NamedTuple):
    """Name and cache of one executed layer, kept for the backward pass."""

    name: str
    kind: str
    cache: tuple
