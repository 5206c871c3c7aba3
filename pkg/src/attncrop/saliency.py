"""Pure-gradient saliency over image patches.

For models whose attention is unavailable or uninformative, importance can
be read straight from the input-pixel gradient of the answer score. Raw
pixel gradients are dominated by edges, so the magnitude is gated by an
edge mask before pooling to the patch grid:

  1. gradient magnitude: per-pixel L2 norm over the 3 channels
  2. edge mask: grayscale -> 3x3 binomial blur -> |pixel - blur|
     -> 3x3 median filter -> keep pixels strictly above the spatial median
  3. pool the masked magnitude to an N x N cell grid by cell means
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .datatypes import ImportanceMap
from .errors import DimensionMismatch, GridSmallerThanPatches, WrongChannelCount

# 3x3 binomial approximation of a Gaussian: outer([1,2,1],[1,2,1]) / 16
BLUR_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


def grad_magnitude(input_grad: np.ndarray) -> np.ndarray:
    """Per-pixel L2 norm of a [3, H, W] gradient, as float64 [H, W]."""
    g = np.asarray(input_grad)
    if g.ndim != 3 or g.shape[0] != 3:
        raise WrongChannelCount(f"input gradient must be [3, H, W], got shape {g.shape}")
    g = g.astype(np.float64)
    return np.sqrt((g * g).sum(axis=0))


def edge_mask(image: np.ndarray) -> np.ndarray:
    """Binary uint8 [H, W] mask of high-frequency (edge) pixels.

    Filters use edge-replicate padding. The threshold is the spatial
    median of the filtered response, strict, so a constant image yields an
    all-zero mask.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise WrongChannelCount(f"image must be [H, W] or [H, W, 3], got {img.shape}")
        gray = img.mean(axis=2)
    elif img.ndim == 2:
        gray = img
    else:
        raise WrongChannelCount(f"image must be [H, W] or [H, W, 3], got {img.shape}")
    blur = ndimage.convolve(gray, BLUR_KERNEL, mode="nearest")
    high = np.abs(gray - blur)
    smooth = ndimage.median_filter(high, size=3, mode="nearest")
    return (smooth > np.median(smooth)).astype(np.uint8)


def pool_to_patches(grid: np.ndarray, n: int) -> ImportanceMap:
    """Mean-pool a non-negative [H, W] grid onto an n x n cell map.

    Cells are ceil(H/n) x ceil(W/n) pixels; trailing cells are smaller when
    n does not divide the dimension. Ceiling cell sizes can leave trailing
    cells with no pixels at all (e.g. H=5, n=4 gives 2-pixel cells and the
    fourth cell starts past the grid); such cells score 0.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionMismatch(f"grid must be 2-D, got shape {g.shape}")
    h, w = g.shape
    if n < 1 or h < n or w < n:
        raise GridSmallerThanPatches(f"cannot pool {h}x{w} grid into {n}x{n} cells")
    ch = math.ceil(h / n)
    cw = math.ceil(w / n)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        rows = g[i * ch : min((i + 1) * ch, h)]
        for j in range(n):
            cell = rows[:, j * cw : min((j + 1) * cw, w)]
            if cell.size:
                out[i, j] = cell.mean()
    return ImportanceMap(
        values=out, patch_width=float(cw), patch_height=float(ch), source_method="pure_grad"
    )


def pure_grad_importance(image: np.ndarray, input_grad: np.ndarray, n: int) -> ImportanceMap:
    """Edge-masked gradient magnitude pooled to the n x n patch grid."""
    mag = grad_magnitude(input_grad)
    img = np.asarray(image)
    if img.shape[:2] != mag.shape:
        raise DimensionMismatch(
            f"image {img.shape[:2]} and gradient {mag.shape} spatial dims disagree"
        )
    mask = edge_mask(img)
    return pool_to_patches(mask * mag, n)
