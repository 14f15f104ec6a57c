"""Synthetic image pairs with known ground truth, for tests and demos."""

from __future__ import annotations

import numpy as np

from .flow import AnnotatedPair, grid_to_pixels
from .matching import FeatureLevel
from .traincheck import Sample


def shifted_features(channels, h, w, shift, rng):
    """Source/target maps where the target is the source translated by ``shift=(dy, dx)``.

    Both are crops of one random field, so ``trg[:, y, x] == src[:, y + dy, x + dx]``
    wherever both sides exist, and every cell has its own random pattern.
    """
    dy, dx = shift
    field = rng.normal(size=(channels, h + abs(dy), w + abs(dx)))
    sy, sx = max(0, -dy), max(0, -dx)
    src = field[:, sy:sy + h, sx:sx + w]
    trg = field[:, sy + dy:sy + dy + h, sx + dx:sx + dx + w]
    return src.copy(), trg.copy()


def shift_sample(cfg, shift=(1, 1), channels=8, feat_hw=None, pixel_scale=16, n_kps=None, margin=1, rng=0):
    """A sample whose target features are the source shifted by ``shift`` feature cells.

    Features are generated at ``feat_hw`` (default: the base resolution) for
    every level. Keypoints sit at base-grid cell centres whose shifted partner
    stays inside the target, at least ``margin`` cells away from the border.
    """
    rng = np.random.default_rng(rng)
    h, w = feat_hw or cfg.base
    dy, dx = shift
    src_levels, trg_levels = [], []
    for l in range(cfg.levels):
        s, t = shifted_features(channels, h, w, shift, rng)
        src_levels.append(FeatureLevel(f"level{l}", s))
        trg_levels.append(FeatureLevel(f"level{l}", t))
    size = (w * pixel_scale, h * pixel_scale)
    cells = [
        (x, y)
        for y in range(margin, h - margin)
        for x in range(margin, w - margin)
        if margin <= y - dy < h - margin and margin <= x - dx < w - margin
    ]
    if n_kps is not None and len(cells) > n_kps:
        pick = rng.choice(len(cells), n_kps, replace=False)
        cells = [cells[i] for i in sorted(pick)]
    src_grid = np.array(cells, dtype=np.float64)
    trg_grid = src_grid - np.array([dx, dy], dtype=np.float64)
    pair = AnnotatedPair(
        grid_to_pixels(src_grid, size, (h, w)),
        grid_to_pixels(trg_grid, size, (h, w)),
        size,
        size,
    )
    return Sample(src_levels, trg_levels, pair)
