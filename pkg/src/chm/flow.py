"""Flow formation, keypoint transfer, training loss and PCK."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class AnnotatedPair:
    src_kps: np.ndarray  # (M, 2) x, y in source pixels
    trg_kps: np.ndarray  # (M, 2) x, y in target pixels
    src_size: tuple  # (w, h)
    trg_size: tuple
    trg_bbox: tuple | None = None  # (x, y, w, h)

    def __post_init__(self):
        self.src_kps = np.asarray(self.src_kps, dtype=np.float64).reshape(-1, 2)
        self.trg_kps = np.asarray(self.trg_kps, dtype=np.float64).reshape(-1, 2)
        if len(self.src_kps) != len(self.trg_kps) or len(self.src_kps) == 0:
            raise ValueError("need equal, non-empty source and target keypoint lists")
        self.src_size = tuple(float(v) for v in self.src_size)
        self.trg_size = tuple(float(v) for v in self.trg_size)
        for name, kps, (w, h) in (("source", self.src_kps, self.src_size), ("target", self.trg_kps, self.trg_size)):
            if w <= 0 or h <= 0:
                raise ValueError(f"{name} image size must be positive")
            if np.any(kps < 0) or np.any(kps[:, 0] > w) or np.any(kps[:, 1] > h):
                raise ValueError(f"{name} keypoints fall outside the image")
        if self.trg_bbox is not None:
            self.trg_bbox = tuple(float(v) for v in self.trg_bbox)


# pixel <-> grid mapping uses the same half-pixel-center convention as resizing
def pixels_to_grid(pts, size, grid):
    """Map (x, y) pixel coordinates of an image of ``size=(w, h)`` to ``grid=(H, W)`` units."""
    pts = np.asarray(pts, dtype=np.float64)
    scale = np.array([grid[1] / size[0], grid[0] / size[1]])
    return (pts + 0.5) * scale - 0.5


def grid_to_pixels(pts, size, grid):
    pts = np.asarray(pts, dtype=np.float64)
    scale = np.array([size[0] / grid[1], size[1] / grid[0]])
    return (pts + 0.5) * scale - 0.5


def gaussian_mask(c, sigma):
    """Per-(i, j) Gaussian over the target grid centred on that slice's argmax."""
    c = T.as_tensor(c, 4, 4)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    H, W, H2, W2 = c.shape
    flat = c.reshape(H, W, -1).argmax(axis=-1)  # first max = smallest (k, l)
    py, px = np.divmod(flat, W2)
    ky = np.arange(H2)[None, None, :, None]
    kx = np.arange(W2)[None, None, None, :]
    d2 = (ky - py[..., None, None]) ** 2 + (kx - px[..., None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def kernel_soft_argmax(c, sigma=5.0):
    """Softmax over the target grid of the Gaussian-modulated scores."""
    g = gaussian_mask(c, sigma)
    return T.softmax_last2(g * c)


def kernel_soft_argmax_backward(c, sigma, probs, grad):
    """Gradient w.r.t. ``c``; the argmax-centred mask is treated as constant."""
    g = gaussian_mask(c, sigma)
    inner = probs * (grad - (probs * grad).sum(axis=(2, 3), keepdims=True))
    return g * inner


def _grid(H, W):
    ys, xs = np.mgrid[0:H, 0:W]
    return np.stack([xs, ys], axis=-1).astype(np.float64)  # (H, W, 2) as (x, y)


def form_flow(probs, tol=1e-6):
    """Expected target grid coordinates ``(x, y)`` for every source cell."""
    probs = T.as_tensor(probs, 4, 4)
    sums = probs.sum(axis=(2, 3))
    if np.any(np.abs(sums - 1.0) > tol) or np.any(probs < 0):
        raise ValueError("flow formation needs probability slices summing to 1")
    grid = _grid(*probs.shape[2:])
    return np.tensordot(probs, grid, axes=([2, 3], [0, 1]))


def form_flow_backward(probs, grad_flow):
    grid = _grid(*probs.shape[2:])
    return np.tensordot(grad_flow, grid, axes=([2], [2]))


def soft_sampler(k, tau, grid):
    """Normalized tent weights around a continuous point ``k=(x, y)`` on an (H, W) grid."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    H, W = grid
    ys, xs = np.mgrid[0:H, 0:W]
    dist = np.sqrt((xs - k[0]) ** 2 + (ys - k[1]) ** 2)
    w = np.maximum(0.0, tau - dist)
    total = w.sum()
    if total <= 0:
        raise ValueError(f"no grid point within tau={tau} of {tuple(k)}")
    return w / total


def transfer_keypoints(flow, pair, tau=2.5, return_weights=False):
    """Predict target keypoints (pixels) by sampling the flow at each source keypoint."""
    flow = np.asarray(flow, dtype=np.float64)
    grid = flow.shape[:2]
    src_grid = pixels_to_grid(pair.src_kps, pair.src_size, grid)
    weights = np.stack([soft_sampler(k, tau, grid) for k in src_grid])
    pred_grid = np.tensordot(weights, flow, axes=([1, 2], [0, 1]))
    pred = grid_to_pixels(pred_grid, pair.trg_size, grid)
    return (pred, weights) if return_weights else pred


def transfer_keypoints_backward(weights, pair, grid, grad_pred):
    """Gradient w.r.t. the flow field, given ``dL/d(pred pixels)``."""
    scale = np.array([pair.trg_size[0] / grid[1], pair.trg_size[1] / grid[0]])
    g_grid = np.asarray(grad_pred) * scale
    return np.tensordot(weights, g_grid, axes=([0], [0]))


def epe_loss(pred, gt):
    """Mean Euclidean distance and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or pred.shape != gt.shape:
        raise ValueError("need equal, non-empty prediction and ground-truth lists")
    diff = pred - gt
    dist = np.sqrt((diff ** 2).sum(axis=1))
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / len(pred)
    return float(dist.mean()), grad


def pck_threshold(pair, alpha, mode="img"):
    if mode == "img":
        w, h = pair.trg_size
    elif mode == "bbox":
        if pair.trg_bbox is None:
            raise ValueError("bbox PCK needs a target bounding box")
        w, h = pair.trg_bbox[2:]
    elif mode == "bbox-kp":
        ext = pair.trg_kps.max(axis=0) - pair.trg_kps.min(axis=0)
        w, h = ext
    else:
        raise ValueError(f"unknown PCK mode {mode!r}")
    return alpha * max(w, h)


def pck(pred, gt, alpha, mode, pair):
    """Fraction of predictions within ``alpha * max(w, h)`` of the ground truth."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    return float(np.mean(dist <= pck_threshold(pair, alpha, mode)))
