"""Numpy implementations of the hot kernels (fallback for the compiled module)."""
from __future__ import annotations

import numpy as np


def zbuffer_winners(pix: np.ndarray, depth: np.ndarray, n_pix: int) -> np.ndarray:
    """Per pixel, the index of the point with the smallest depth (ties: smallest index); -1 if empty."""
    pix = np.asarray(pix, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    win = np.full(n_pix, -1, dtype=np.int64)
    if pix.size == 0:
        return win
    order = np.lexsort((np.arange(pix.size), depth, pix))
    uniq, first = np.unique(pix[order], return_index=True)
    win[uniq] = order[first]
    return win


def lattice_scores(heat: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sum over views of bilinearly sampled heatmaps.

    heat: (V, H, W); rows, cols: (V, M) continuous pixel coordinates, pixel
    centers at +0.5. Sampling clamps to the image edge.
    """
    heat = np.asarray(heat, dtype=np.float64)
    n_views, h, w = heat.shape
    score = np.zeros(rows.shape[1])
    for v in range(n_views):
        y = np.clip(rows[v] - 0.5, 0.0, h - 1.0)
        x = np.clip(cols[v] - 0.5, 0.0, w - 1.0)
        y0 = np.floor(y).astype(np.int64)
        x0 = np.floor(x).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = y - y0
        fx = x - x0
        hv = heat[v]
        top = (1.0 - fx) * hv[y0, x0] + fx * hv[y0, x1]
        bot = (1.0 - fx) * hv[y1, x0] + fx * hv[y1, x1]
        score = score + ((1.0 - fy) * top + fy * bot)
    return score
