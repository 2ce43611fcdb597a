"""Small image helpers shared by augmentation and CAM upsampling."""

from __future__ import annotations

import numpy as np


def _axis_weights(n_in: int, n_out: int, start: float = 0.0, extent: float | None = None):
    """Source indices/weights for half-pixel-centred linear resampling."""
    extent = float(n_in) if extent is None else float(extent)
    step = extent / n_out
    src = start + (np.arange(n_out) + 0.5) * step - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinear resampling of the first two axes.

    ``box = (top, left, height, width)`` selects a (possibly fractional)
    source window; by default the whole image is used. Same-size resizing of
    the full image returns an exact copy.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if box is None:
        if (h, w) == (out_h, out_w):
            return img.copy()
        box = (0.0, 0.0, h, w)
    top, left, bh, bw = box
    y0, y1, fy = _axis_weights(h, out_h, top, bh)
    x0, x1, fx = _axis_weights(w, out_w, left, bw)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top_row = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot_row = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top_row * (1 - fy) + bot_row * fy


def resize_nearest(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Nearest-neighbour counterpart of :func:`resize_bilinear` (for label grids)."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if box is None:
        if (h, w) == (out_h, out_w):
            return img.copy()
        box = (0.0, 0.0, h, w)
    top, left, bh, bw = box
    ys = np.clip(np.floor(top + (np.arange(out_h) + 0.5) * bh / out_h), 0, h - 1).astype(int)
    xs = np.clip(np.floor(left + (np.arange(out_w) + 0.5) * bw / out_w), 0, w - 1).astype(int)
    return img[ys][:, xs]
