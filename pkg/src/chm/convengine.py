"""Convolution engines for 4D/6D correlation tensors.

Both engines use stride 1 and zero padding of ``extent // 2`` so the output
has the input's shape. The dense engine visits every kernel tap; the
center-pivot engine runs two half-dimensional convolutions, one over each
image's subspace. Taps are accumulated as shifted slices of the padded input
in a fixed order, so results are deterministic.

``stats``, when given, is a dict that receives ``taps`` (multiply-adds per
output element) and ``macs`` (total multiply-adds).
"""

from __future__ import annotations

import itertools

import numpy as np

from .kernels import SharedKernel, materialize, scatter_grad


def _check_rank(c, k):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != k.dims.ndim:
        raise ValueError(
            f"rank-{c.ndim} tensor does not match {k.dims.ndim}D kernel {k.dims.half}"
        )
    return c


def _pad(c, radii):
    return np.pad(c, [(r, r) for r in radii])


def _window(offset, shape):
    return tuple(slice(o, o + n) for o, n in zip(offset, shape))


def _count(stats, taps, n_out):
    if stats is not None:
        stats["taps"] = stats.get("taps", 0) + taps
        stats["macs"] = stats.get("macs", 0) + taps * n_out


def conv_dense(c, k: SharedKernel, stats=None):
    """``out(x, x') = b + sum c(x + z, x' + z') * k(z, z')`` over the full window."""
    c = _check_rank(c, k)
    dense = materialize(k)
    radii = [n // 2 for n in dense.shape]
    padded = _pad(c, radii)
    out = np.full(c.shape, k.bias)
    tmp = np.empty_like(out)
    for tap in itertools.product(*(range(n) for n in dense.shape)):
        np.multiply(padded[_window(tap, c.shape)], dense[tap], out=tmp)
        out += tmp
    _count(stats, dense.size, out.size)
    return out


def cp_half_kernels(k: SharedKernel):
    """Split a center-pivot kernel into its two half-dimensional kernels.

    ``k_c`` is ``k(0, :)`` and acts on the target subspace; ``k_c'`` is
    ``k(:, 0)`` with its center zeroed so the shared (0, 0) weight counts once.
    """
    if not k.scheme.center_pivot:
        raise ValueError(f"center-pivot engine needs a cp_* scheme, got {k.scheme.value}")
    dense = materialize(k)
    center = tuple(n // 2 for n in k.dims.half)
    k_c = dense[center].copy()
    k_cp = dense[(Ellipsis,) + center].copy()
    k_cp[center] = 0.0
    return k_c, k_cp


def _half_conv(c, kern, second, stats, skip_center=False):
    # convolve over dims [half:] (second=True) or [:half], other half held fixed
    half = kern.ndim
    radii = [n // 2 for n in kern.shape]
    pad_radii = [0] * half + radii if second else radii + [0] * half
    padded = _pad(c, pad_radii)
    out = np.zeros(c.shape)
    tmp = np.empty_like(out)
    center = tuple(radii)
    taps = 0
    for tap in itertools.product(*(range(n) for n in kern.shape)):
        if skip_center and tap == center:
            continue
        full = (0,) * half + tap if second else tap + (0,) * half
        np.multiply(padded[_window(full, c.shape)], kern[tap], out=tmp)
        out += tmp
        taps += 1
    _count(stats, taps, out.size)
    return out


def conv_cp(c, k: SharedKernel, stats=None):
    """Center-pivot convolution as two half-dimensional convolutions.

    ``out(x, x') = b + sum_p' c(x, p') k_c(p' - x') + sum_p c(p, x') k_c'(p - x)``
    """
    c = _check_rank(c, k)
    k_c, k_cp = cp_half_kernels(k)
    out = _half_conv(c, k_c, second=True, stats=stats)
    out += _half_conv(c, k_cp, second=False, stats=stats, skip_center=True)
    out += k.bias
    return out


def conv(c, k: SharedKernel, engine="dense", stats=None):
    if engine == "cp":
        return conv_cp(c, k, stats)
    if engine == "dense":
        return conv_dense(c, k, stats)
    raise ValueError(f"unknown engine {engine!r}")


def taps_per_output(k: SharedKernel, engine="dense"):
    """Multiply-adds per output element, without running a convolution."""
    if engine == "cp":
        return 2 * k.dims.half_volume - 1
    return k.dims.half_volume ** 2


def _active_taps(k, engine):
    shape = k.dims.shape
    taps = itertools.product(*(range(n) for n in shape))
    if engine == "cp":
        return [t for t in taps if k.index_map[t] >= 0]
    return list(taps)


def conv_backward(c, k: SharedKernel, upstream, engine="dense"):
    """Gradients of a CHM convolution.

    Returns ``(grad_c, grad_params, grad_bias)`` for the forward call
    ``conv(c, k, engine)`` given ``upstream = dL/d(out)``.
    """
    c = _check_rank(c, k)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != c.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != input shape {c.shape}")
    if engine == "cp" and not k.scheme.center_pivot:
        raise ValueError(f"center-pivot engine needs a cp_* scheme, got {k.scheme.value}")
    dense = materialize(k)
    radii = [n // 2 for n in dense.shape]
    padded = _pad(c, radii)
    grad_padded = np.zeros_like(padded)
    grad_dense = np.zeros(dense.shape)
    for tap in _active_taps(k, engine):
        win = _window(tap, c.shape)
        grad_padded[win] += dense[tap] * upstream
        grad_dense[tap] = np.vdot(padded[win], upstream)
    grad_c = grad_padded[tuple(slice(r, r + n) for r, n in zip(radii, c.shape))]
    return grad_c, scatter_grad(k, grad_dense), float(upstream.sum())


def scale_maxpool(c):
    """Max over both scale axes of a (H, W, S, H', W', S') tensor.

    Returns ``(pooled, argmax)`` where ``argmax[..., 0]`` is the source scale
    ``m`` and ``argmax[..., 1]`` the target scale ``n``. Ties resolve to the
    lexicographically smallest ``(m, n)``.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 6:
        raise ValueError(f"scale_maxpool expects a rank-6 tensor, got rank {c.ndim}")
    h, w, s, h2, w2, s2 = c.shape
    flat = c.transpose(0, 1, 3, 4, 2, 5).reshape(h, w, h2, w2, s * s2)
    idx = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    argmax = np.stack([idx // s2, idx % s2], axis=-1)
    return pooled, argmax


def scale_maxpool_backward(upstream, argmax, s, s2=None):
    """Route the pooled gradient back to the recorded argmax scale pair."""
    s2 = s if s2 is None else s2
    upstream = np.asarray(upstream, dtype=np.float64)
    h, w, h2, w2 = upstream.shape
    grad = np.zeros((h, w, h2, w2, s, s2))
    i, j, k, l = np.indices(upstream.shape)
    grad[i, j, k, l, argmax[..., 0], argmax[..., 1]] = upstream
    return grad.transpose(0, 1, 4, 2, 3, 5)


def scale_argmax_histogram(argmax, s, s2=None):
    """Counts of winning (m, n) scale pairs, as an (S, S') integer array."""
    s2 = s if s2 is None else s2
    flat = argmax[..., 0].ravel() * s2 + argmax[..., 1].ravel()
    return np.bincount(flat, minlength=s * s2).reshape(s, s2)
