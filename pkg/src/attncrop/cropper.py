"""Turning importance maps into crop windows, and the high-resolution
block machinery around them.

Window selection slides candidate squares over the cell grid at several
size multipliers of the model input resolution and keeps the window whose
internal mass most exceeds the mean mass of its axis-adjacent placements;
that difference rewards windows that concentrate mass rather than sit in a
uniform region. All rounding is floor(x + 0.5) so results do not depend on
the host's round-half-to-even behaviour.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datatypes import BBox, ImportanceMap
from .errors import (
    BlockMapMismatch,
    DegenerateBBox,
    DimensionMismatch,
    EmptyMap,
    NonPositiveResolution,
    OutOfBounds,
)

DEFAULT_MULTIPLIERS = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)

HIGH_RES_BLOCK_LIMIT = 1024


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


def select_bbox(
    importance: ImportanceMap,
    image_width: int,
    image_height: int,
    input_resolution: int,
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS,
) -> BBox:
    """Best-scoring window over the cell grid, as a pixel box.

    For each multiplier a, the window side is round(a * input_resolution)
    pixels, clamped to the shorter image side, then converted to whole
    cells per axis (round(side / patch), clamped to [1, cells]). The window
    slides one cell at a time; the best placement maximizes internal sum
    (ties: smallest y, then x). The window score is the internal sum minus
    the mean of the sums at the up-to-4 axis-adjacent placements (no
    neighbours: score = sum). Final ties go to the smallest multiplier.
    """
    vals = importance.values
    if vals.size == 0:
        raise EmptyMap("importance map has no cells")
    if input_resolution <= 0:
        raise NonPositiveResolution(f"input resolution must be >= 1, got {input_resolution}")
    if image_width <= 0 or image_height <= 0:
        raise DegenerateBBox(f"image size must be positive, got {image_width}x{image_height}")
    if not multipliers:
        raise ValueError("multipliers must be non-empty")
    rows, cols = vals.shape

    best_score = -math.inf
    best: tuple[int, int, int, int] | None = None  # (cy, cx, pos_y, pos_x)
    for alpha in multipliers:
        side = _round_half_up(alpha * input_resolution)
        side = min(side, image_width, image_height)
        if side < 1:
            side = 1
        cx = _clamp(_round_half_up(side / importance.patch_width), 1, cols)
        cy = _clamp(_round_half_up(side / importance.patch_height), 1, rows)
        sums = sliding_window_view(vals, (cy, cx)).sum(axis=(2, 3))
        # first argmax in row-major order = smallest y, then smallest x
        pos_y, pos_x = np.unravel_index(int(np.argmax(sums)), sums.shape)
        internal = sums[pos_y, pos_x]
        neigh = []
        if pos_y > 0:
            neigh.append(sums[pos_y - 1, pos_x])
        if pos_y + 1 < sums.shape[0]:
            neigh.append(sums[pos_y + 1, pos_x])
        if pos_x > 0:
            neigh.append(sums[pos_y, pos_x - 1])
        if pos_x + 1 < sums.shape[1]:
            neigh.append(sums[pos_y, pos_x + 1])
        score = internal - (sum(neigh) / len(neigh)) if neigh else internal
        if score > best_score:
            best_score = score
            best = (cy, cx, int(pos_y), int(pos_x))

    assert best is not None
    cy, cx, pos_y, pos_x = best
    ox, oy = importance.origin
    px = _round_half_up(ox + pos_x * importance.patch_width)
    py = _round_half_up(oy + pos_y * importance.patch_height)
    pw = _round_half_up(cx * importance.patch_width)
    ph = _round_half_up(cy * importance.patch_height)
    pw = min(pw, image_width)
    ph = min(ph, image_height)
    px = _clamp(px, 0, image_width - pw)
    py = _clamp(py, 0, image_height - ph)
    return BBox(px, py, pw, ph)


def expand_to_square(bbox: BBox, image_width: int, image_height: int) -> BBox:
    """Smallest square covering bbox, centered on it, kept inside the image.

    The side is max(w, h) clamped to the shorter image side; the square is
    centered on the bbox center and then translated the minimal distance
    needed to lie fully inside the image.
    """
    if bbox.w <= 0 or bbox.h <= 0:
        raise DegenerateBBox(f"cannot expand a degenerate box {bbox}")
    if image_width <= 0 or image_height <= 0:
        raise DegenerateBBox(f"image size must be positive, got {image_width}x{image_height}")
    side = min(max(bbox.w, bbox.h), image_width, image_height)
    cx = bbox.x + bbox.w / 2.0
    cy = bbox.y + bbox.h / 2.0
    x = _round_half_up(cx - side / 2.0)
    y = _round_half_up(cy - side / 2.0)
    x = _clamp(x, 0, image_width - side)
    y = _clamp(y, 0, image_height - side)
    return BBox(x, y, side, side)


def resize_bilinear(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Corner-aligned bilinear resample, float64 output.

    Sample i maps to source coordinate i * (S - 1) / (R - 1); an output
    length of 1 samples coordinate 0 (the top-left corner). Implemented
    here rather than through an image library so results are reproducible
    bit for bit across library versions.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise DimensionMismatch(f"image must be [H, W] or [H, W, C], got shape {img.shape}")
    if out_height < 1 or out_width < 1:
        raise NonPositiveResolution(f"output size must be >= 1, got {out_height}x{out_width}")
    in_h, in_w = img.shape[0], img.shape[1]

    def axis_coords(out_n: int, in_n: int) -> np.ndarray:
        if out_n == 1:
            return np.zeros(1, dtype=np.float64)
        return np.arange(out_n, dtype=np.float64) * ((in_n - 1) / (out_n - 1))

    ys = axis_coords(out_height, in_h)
    xs = axis_coords(out_width, in_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_and_resize(image: np.ndarray, square: BBox, resize_to: int) -> np.ndarray:
    """Cut a square window out of the image and resample it to the model size."""
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise DimensionMismatch(f"image must be [H, W] or [H, W, C], got shape {img.shape}")
    h, w = img.shape[0], img.shape[1]
    if not square.inside(w, h):
        raise OutOfBounds(f"window {square} not inside {w}x{h} image")
    if resize_to <= 0:
        raise NonPositiveResolution(f"resize_to must be >= 1, got {resize_to}")
    patch = img[square.y : square.bottom, square.x : square.right]
    return resize_bilinear(patch, resize_to, resize_to)


def _split_even(total: int, parts: int) -> list[int]:
    """Sizes summing to total; first (total % parts) parts one pixel larger."""
    base, extra = divmod(total, parts)
    return [base + 1 if i < extra else base for i in range(parts)]


def tile_blocks(image_width: int, image_height: int, limit: int = HIGH_RES_BLOCK_LIMIT) -> list[BBox]:
    """Partition an image into a grid of blocks each at most limit per side.

    Uses ceil(dim / limit) blocks per axis with remainders spread one pixel
    at a time over the leading blocks, so block sizes differ by at most one
    pixel and the largest is ceil(dim / count) <= limit. Returned row-major.
    """
    if image_width <= 0 or image_height <= 0:
        raise DegenerateBBox(f"image size must be positive, got {image_width}x{image_height}")
    if limit <= 0:
        raise NonPositiveResolution(f"block limit must be >= 1, got {limit}")
    cols = math.ceil(image_width / limit)
    rows = math.ceil(image_height / limit)
    widths = _split_even(image_width, cols)
    heights = _split_even(image_height, rows)
    xs = [0] + list(itertools.accumulate(widths[:-1]))
    ys = [0] + list(itertools.accumulate(heights[:-1]))
    return [
        BBox(xs[j], ys[i], widths[j], heights[i])
        for i in range(rows)
        for j in range(cols)
    ]


def stitch_maps(blocks: list[BBox], maps: list[ImportanceMap]) -> ImportanceMap:
    """Assemble per-block importance maps into one map over the full image.

    blocks and maps must correspond 1:1 in row-major block order, all maps
    must share cell-grid shape and source method, and every map's origin
    must sit at its block's top-left corner. The stitched patch size is the
    nominal total_size / total_cells; block sizes from tile_blocks differ
    by at most one pixel so per-block patch sizes match it to < 1 cell.
    """
    if len(blocks) != len(maps) or not blocks:
        raise BlockMapMismatch(f"got {len(blocks)} blocks but {len(maps)} maps")
    shape = (maps[0].rows, maps[0].cols)
    method = maps[0].source_method
    for m in maps:
        if (m.rows, m.cols) != shape:
            raise BlockMapMismatch(f"map grids disagree: {(m.rows, m.cols)} != {shape}")
        if m.source_method != method:
            raise BlockMapMismatch(f"map methods disagree: {m.source_method} != {method}")
    for b, m in zip(blocks, maps):
        if m.origin != (float(b.x), float(b.y)):
            raise BlockMapMismatch(f"map origin {m.origin} does not match block corner {b}")

    ys = sorted({b.y for b in blocks})
    xs = sorted({b.x for b in blocks})
    rows, cols = len(ys), len(xs)
    if rows * cols != len(blocks):
        raise BlockMapMismatch("blocks do not form a full grid")
    index = {(b.y, b.x): i for i, b in enumerate(blocks)}
    if len(index) != len(blocks):
        raise BlockMapMismatch("duplicate block corners")
    # validate the grid tiles the plane: widths constant down columns,
    # heights constant along rows, offsets contiguous
    for i, y in enumerate(ys):
        row_blocks = []
        for x in xs:
            if (y, x) not in index:
                raise BlockMapMismatch(f"missing block at corner ({x}, {y})")
            row_blocks.append(blocks[index[(y, x)]])
        expected_x = 0
        for b in row_blocks:
            if b.x != expected_x:
                raise BlockMapMismatch(f"blocks leave a gap at x={expected_x}")
            expected_x = b.right
        if len({b.h for b in row_blocks}) != 1:
            raise BlockMapMismatch(f"blocks in row y={y} have differing heights")
    for x in xs:
        col_blocks = [blocks[index[(y, x)]] for y in ys]
        expected_y = 0
        for b in col_blocks:
            if b.y != expected_y:
                raise BlockMapMismatch(f"blocks leave a gap at y={expected_y}")
            expected_y = b.bottom
        if len({b.w for b in col_blocks}) != 1:
            raise BlockMapMismatch(f"blocks in column x={x} have differing widths")

    grid = np.block(
        [[maps[index[(y, x)]].values for x in xs] for y in ys]
    )
    total_w = sum(blocks[index[(ys[0], x)]].w for x in xs)
    total_h = sum(blocks[index[(y, xs[0])]].h for y in ys)
    return ImportanceMap(
        values=grid,
        patch_width=total_w / grid.shape[1],
        patch_height=total_h / grid.shape[0],
        origin=(0.0, 0.0),
        source_method=method,
    )
