"""Multi-scale correlation and the CHM matching network forward pass.

Layout conventions:

* feature maps are ``[C, h, w]``;
* 4D correlations are ``(y, x, y', x')``;
* 6D correlations are ``(y, x, m, y', x', n)`` with ``m`` the source scale and
  ``n`` the target scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import tensor as T
from .convengine import conv, scale_maxpool
from .kernels import KernelDims, Scheme, SharedKernel, materialize


@dataclass
class FeatureLevel:
    name: str
    tensor: np.ndarray

    def __post_init__(self):
        self.tensor = T.as_tensor(self.tensor, 3, 3, name=f"feature level {self.name!r}")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError(f"feature level {self.name!r} has non-finite values")

    @property
    def channels(self):
        return self.tensor.shape[0]


@dataclass
class ProjectionParams:
    """Per-scale 3x3 convolutions reducing C channels to C // rho."""

    weights: list
    biases: list

    @classmethod
    def init(cls, channels, n_scales, rho, rng=None):
        rng = np.random.default_rng(rng)
        out_ch = channels // rho
        if out_ch < 1:
            raise ValueError(f"rho={rho} leaves no channels from C={channels}")
        std = 1.0 / np.sqrt(9 * channels)
        weights = [rng.normal(0.0, std, size=(out_ch, channels, 3, 3)) for _ in range(n_scales)]
        biases = [np.zeros(out_ch) for _ in range(n_scales)]
        return cls(weights, biases)

    @classmethod
    def identity(cls, channels, n_scales):
        w = np.zeros((channels, channels, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls([w.copy() for _ in range(n_scales)], [np.zeros(channels) for _ in range(n_scales)])

    def copy(self):
        return ProjectionParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ChmStack:
    kernels_6d: list
    kernel_4d: SharedKernel
    engine: str = "dense"

    @classmethod
    def from_config(cls, cfg, rng=None):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        kw = dict(spread=cfg.init_spread, center_boost=cfg.init_center_boost)
        k6 = [SharedKernel.init(cfg.scheme, cfg.dims_6d, seed=rng, **kw) for _ in range(cfg.levels)]
        k4 = SharedKernel.init(cfg.scheme, cfg.dims_4d, seed=rng, **kw)
        return cls(k6, k4, cfg.engine)

    @classmethod
    def delta(cls, cfg, value=1.0):
        k6 = [SharedKernel.delta(cfg.scheme, cfg.dims_6d, value) for _ in range(cfg.levels)]
        return cls(k6, SharedKernel.delta(cfg.scheme, cfg.dims_4d, value), cfg.engine)

    def copy(self):
        return ChmStack([k.copy() for k in self.kernels_6d], self.kernel_4d.copy(), self.engine)


def scaled_size(h, w, factor):
    return max(1, int(round(h * factor))), max(1, int(round(w * factor)))


def conv3x3(x, weight, bias):
    """Same-padded 3x3 convolution of a [C, h, w] map."""
    c, h, w = x.shape
    if weight.shape[1] != c:
        raise ValueError(f"projection expects {weight.shape[1]} channels, features have {c}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias[:, None, None], (weight.shape[0], h, w)).copy()
    for dy in range(3):
        for dx in range(3):
            out += np.tensordot(weight[:, :, dy, dx], xp[:, dy:dy + h, dx:dx + w], axes=(1, 0))
    return out


def conv3x3_backward(x, weight, grad_out):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weight)
    for dy in range(3):
        for dx in range(3):
            win = xp[:, dy:dy + h, dx:dx + w]
            grad_w[:, :, dy, dx] = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
            grad_xp[:, dy:dy + h, dx:dx + w] += np.tensordot(weight[:, :, dy, dx], grad_out, axes=(0, 0))
    return grad_xp[:, 1:-1, 1:-1], grad_w, grad_out.sum(axis=(1, 2))


def project_features(level, cfg, theta):
    """Build the S projected feature maps of one image at one backbone level.

    Each scale resizes the raw map by its factor, applies its 3x3 projection
    and resizes the result to the common base resolution.
    """
    x = level.tensor if isinstance(level, FeatureLevel) else T.as_tensor(level, 3, 3)
    if len(theta.weights) != cfg.S:
        raise ValueError(f"projection has {len(theta.weights)} scales, config has S={cfg.S}")
    _, h, w = x.shape
    out = []
    for s, factor in enumerate(cfg.scale_factors):
        resized = T.resize_bilinear_2d(x, *scaled_size(h, w, factor))
        proj = conv3x3(resized, theta.weights[s], theta.biases[s])
        out.append(T.resize_bilinear_2d(proj, *cfg.base))
    return out


def project_features_backward(level, cfg, theta, grads):
    """Gradients of project_features w.r.t. the projection weights and biases."""
    x = level.tensor if isinstance(level, FeatureLevel) else np.asarray(level, dtype=np.float64)
    _, h, w = x.shape
    gw, gb = [], []
    for s, factor in enumerate(cfg.scale_factors):
        sh, sw = scaled_size(h, w, factor)
        resized = T.resize_bilinear_2d(x, sh, sw)
        g_proj = T.resize_bilinear_2d_backward(grads[s], sh, sw)
        _, dw, db = conv3x3_backward(resized, theta.weights[s], g_proj)
        gw.append(dw)
        gb.append(db)
    return gw, gb


def _normalize(f, eps=0.0):
    norm = np.sqrt((f * f).sum(axis=0))
    safe = np.where(norm > eps, norm, 1.0)
    return np.where(norm > eps, f / safe, 0.0), norm


def cosine_correlation(a, b):
    """ReLU'd cosine similarity between every source and target position."""
    an, _ = _normalize(a)
    bn, _ = _normalize(b)
    return T.relu(np.tensordot(an, bn, axes=(0, 0)))


def cosine_correlation_backward(a, b, grad):
    """Gradients of cosine_correlation w.r.t. both feature maps."""
    an, na = _normalize(a)
    bn, nb = _normalize(b)
    cos = np.tensordot(an, bn, axes=(0, 0))
    g = np.where(cos > 0, grad, 0.0)
    # d cos / d a = (bn - cos * an) / |a|
    ga = np.tensordot(bn, g, axes=([1, 2], [2, 3]))
    ga -= an * (g * cos).sum(axis=(2, 3))[None]
    ga = np.where(na > 0, ga / np.where(na > 0, na, 1.0), 0.0)
    gb = np.tensordot(an, g, axes=([1, 2], [0, 1]))
    gb -= bn * (g * cos).sum(axis=(0, 1))[None]
    gb = np.where(nb > 0, gb / np.where(nb > 0, nb, 1.0), 0.0)
    return ga, gb


def correlation_6d(src, trg, base):
    """Stack all S x S scale-pair correlations into a (H, W, S, H, W, S) tensor."""
    if len(src) != len(trg):
        raise ValueError("source and target need the same number of scales")
    H, W = base
    n = len(src)
    out = np.zeros((H, W, n, H, W, n))
    for m in range(n):
        for k in range(n):
            if src[m].shape[0] != trg[k].shape[0]:
                raise ValueError(f"channel mismatch at scale pair ({m}, {k})")
            slab = cosine_correlation(src[m], trg[k])
            out[:, :, m, :, :, k] = T.resize_4d(slab, (H, W, H, W))
    return out


def correlation_6d_backward(src, trg, grad):
    n = len(src)
    g_src = [np.zeros_like(f) for f in src]
    g_trg = [np.zeros_like(f) for f in trg]
    for m in range(n):
        for k in range(n):
            shape = src[m].shape[1:] + trg[k].shape[1:]
            g_slab = T.resize_4d_backward(grad[:, :, m, :, :, k], shape)
            ga, gb = cosine_correlation_backward(src[m], trg[k], g_slab)
            g_src[m] += ga
            g_trg[k] += gb
    return g_src, g_trg


@dataclass
class ChmOutput:
    corr: np.ndarray
    scale_argmax: list
    cache: dict = field(default_factory=dict, repr=False)


def chmnet_forward(src_levels, trg_levels, stack, cfg, projections, keep_cache=False):
    """Correlation -> 6D CHM -> scale maxpool -> level sum -> sigmoid -> upsample -> 4D CHM.

    ``src_levels``/``trg_levels`` hold one FeatureLevel per backbone level and
    ``projections`` one (source, target) shared ProjectionParams per level.
    Returns the final (H_up, W_up, H_up, W_up) correlation with per-level
    scale-argmax maps.
    """
    if not (len(src_levels) == len(trg_levels) == len(stack.kernels_6d) == len(projections)):
        raise ValueError("levels, kernels and projections must have the same count")
    if len(src_levels) not in (1, 2):
        raise ValueError("one or two feature levels are supported")
    cache = {"levels": []}
    fused = None
    argmaxes = []
    for src, trg, k6, theta in zip(src_levels, trg_levels, stack.kernels_6d, projections):
        if src.channels != trg.channels:
            raise ValueError(f"level {src.name!r}: source/target channel mismatch")
        fs = project_features(src, cfg, theta)
        ft = project_features(trg, cfg, theta)
        c1 = correlation_6d(fs, ft, cfg.base)
        c2 = conv(c1, k6, stack.engine)
        c3, am = scale_maxpool(c2)
        argmaxes.append(am)
        fused = c3 if fused is None else fused + c3
        if keep_cache:
            cache["levels"].append({"fs": fs, "ft": ft, "c1": c1, "argmax": am})
    act = T.sigmoid(fused)
    up = T.resize_4d(act, cfg.upsampled * 2)
    out = conv(up, stack.kernel_4d, stack.engine)
    if keep_cache:
        cache.update(fused=fused, act=act, up=up)
    return ChmOutput(out, argmaxes, cache)


def init_model(cfg, channels, rng=None):
    """Fresh (stack, projections) for the given per-level channel counts."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    stack = ChmStack.from_config(cfg, rng)
    projections = [ProjectionParams.init(c, cfg.S, cfg.rho, rng) for c in channels]
    return stack, projections


# --- global Hough voting baseline ---------------------------------------------------------


def iso_profile(kernel):
    """Weight of an isotropic 4D kernel as a function of squared displacement.

    Accepts an ``iso`` SharedKernel (displacements outside its support get 0)
    or a positive float sigma for a discretized Gaussian.
    """
    if isinstance(kernel, SharedKernel):
        if kernel.scheme is not Scheme.ISO or kernel.dims.s is not None:
            raise ValueError("global voting needs a 4D iso kernel")
        dense = materialize(kernel)
        table = {}
        offs = kernel.dims.offsets()
        for i, z in enumerate(offs):
            for j, zp in enumerate(offs):
                d = (zp[0] - z[0], zp[1] - z[1])
                table[d[0] ** 2 + d[1] ** 2] = dense[z[0] + kernel.dims.h // 2, z[1] + kernel.dims.w // 2,
                                                     zp[0] + kernel.dims.h // 2, zp[1] + kernel.dims.w // 2]
        return lambda sq: np.vectorize(lambda q: table.get(int(q), 0.0), otypes=[float])(sq)
    sigma = float(kernel)
    return lambda sq: np.exp(-np.asarray(sq, dtype=np.float64) / (2 * sigma * sigma))


def rhm_vote(c, kernel=1.0):
    """Global Hough voting over translation offsets, then rescoring.

    ``hough[dy + H - 1, dx + W - 1]`` is the vote for offset ``(dy, dx) = x' - x``.
    Returns ``(hough, rescored)`` with ``rescored(x, x') = c(x, x') * hough(x' - x)``.
    """
    c = T.as_tensor(c, 4, 4)
    H, W, H2, W2 = c.shape
    profile = iso_profile(kernel)
    # offset histogram: total correlation mass per displacement
    ny, nx = H + H2 - 1, W + W2 - 1
    hist = np.zeros((ny, nx))
    y, x, yp, xp = np.indices(c.shape)
    np.add.at(hist, (yp - y + H - 1, xp - x + W - 1), c)
    qy, qx = np.mgrid[-(ny - 1):ny, -(nx - 1):nx]
    kgrid = profile(qy * qy + qx * qx)
    full = convolve2d(hist, kgrid, mode="full")
    hough = full[ny - 1:2 * ny - 1, nx - 1:2 * nx - 1]
    rescored = c * hough[yp - y + H - 1, xp - x + W - 1]
    return hough, rescored


def local_vote_oracle(c, x, xp, weight_fn, window, h=None):
    """Direct local Hough vote for one candidate match (x, x').

    Sums ``c(p, p') * weight_fn(|d_xy|^2, |d_s|)`` over all neighbours ``p`` of
    ``x`` and ``p'`` of ``x'`` inside ``window``, where ``d = (p' - x') - (p - x) - h``
    is the displacement measured relative to the match. Positions outside the
    tensor contribute nothing; ``h`` defaults to the zero bin. ``weight_fn``
    must accept integer arrays.
    """
    c = np.asarray(c, dtype=np.float64)
    window = KernelDims.parse(window)
    half = len(window.half)
    h = np.zeros(half, dtype=int) if h is None else np.asarray(h, dtype=int)
    offs = np.array(window.offsets(), dtype=int)
    p = np.asarray(x, dtype=int) + offs
    pp = np.asarray(xp, dtype=int) + offs
    ok = np.all((p >= 0) & (p < c.shape[:half]), axis=1)
    okp = np.all((pp >= 0) & (pp < c.shape[half:]), axis=1)
    if not ok.any() or not okp.any():
        return 0.0
    z, zp, p, pp = offs[ok], offs[okp], p[ok], pp[okp]
    idx = tuple(p[:, None, d] for d in range(half)) + tuple(pp[None, :, d] for d in range(half))
    d = zp[None, :, :] - z[:, None, :] - h
    sq = d[..., 0] ** 2 + d[..., 1] ** 2
    ds = np.abs(d[..., 2]) if half == 3 else np.zeros_like(sq)
    return float((c[idx] * weight_fn(sq, ds)).sum())
