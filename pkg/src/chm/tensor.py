"""Dense tensor primitives: bilinear resizing, activations and slice softmax.

Tensors are plain ``numpy.ndarray`` objects in float64. Every function here is
pure and returns a new array.
"""

from __future__ import annotations

import numpy as np

MAX_RANK = 6


def as_tensor(t, min_rank=1, max_rank=MAX_RANK, name="tensor"):
    t = np.asarray(t, dtype=np.float64)
    if not (min_rank <= t.ndim <= max_rank):
        raise ValueError(f"{name} must have rank in [{min_rank}, {max_rank}], got {t.ndim}")
    if 0 in t.shape:
        raise ValueError(f"{name} has a zero-sized dimension: {t.shape}")
    return t


def ravel_index(index, shape):
    """Row-major linear index of a multi-index."""
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unravel_index(linear, shape):
    return tuple(int(i) for i in np.unravel_index(int(linear), tuple(shape)))


def interp_matrix(n_in, n_out):
    """Bilinear interpolation matrix of shape (n_out, n_in).

    Output sample i reads the input at (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got in={n_in} out={n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _apply_along(t, mat, axis):
    # contract mat (out, in) with axis of t, keep axis position
    out = np.tensordot(mat, t, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def resize_bilinear_2d(t, out_h, out_w):
    """Resize a [H, W] or [C, H, W] tensor to (out_h, out_w)."""
    t = as_tensor(t, 2, 3)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got ({out_h}, {out_w})")
    h, w = t.shape[-2:]
    out = _apply_along(t, interp_matrix(h, out_h), t.ndim - 2)
    return _apply_along(out, interp_matrix(w, out_w), t.ndim - 1)


def resize_bilinear_2d_backward(grad, in_h, in_w):
    """Adjoint of resize_bilinear_2d: maps an output gradient back to input shape."""
    grad = np.asarray(grad, dtype=np.float64)
    oh, ow = grad.shape[-2:]
    g = _apply_along(grad, interp_matrix(in_h, oh).T, grad.ndim - 2)
    return _apply_along(g, interp_matrix(in_w, ow).T, grad.ndim - 1)


def resize_4d(t, out_shape, first_pair_first=True):
    """Separable bilinear resize of a rank-4 tensor to out_shape.

    The (dim0, dim1) pair and the (dim2, dim3) pair are resized by independent
    passes; the pass order does not affect the result.
    """
    t = as_tensor(t, 4, 4)
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 4 or min(out_shape) < 1:
        raise ValueError(f"out_shape must be 4 positive ints, got {out_shape}")
    pairs = [(0, 1), (2, 3)] if first_pair_first else [(2, 3), (0, 1)]
    out = t
    for a, b in pairs:
        out = _apply_along(out, interp_matrix(t.shape[a], out_shape[a]), a)
        out = _apply_along(out, interp_matrix(t.shape[b], out_shape[b]), b)
    return out


def resize_4d_backward(grad, in_shape):
    grad = np.asarray(grad, dtype=np.float64)
    out = grad
    for ax in range(4):
        out = _apply_along(out, interp_matrix(in_shape[ax], grad.shape[ax]).T, ax)
    return out


def relu(t):
    return np.maximum(np.asarray(t, dtype=np.float64), 0.0)


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_last2(t):
    """Softmax over the last two axes of a rank-4 tensor."""
    t = as_tensor(t, 4, 4)
    shifted = t - t.max(axis=(2, 3), keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=(2, 3), keepdims=True)
