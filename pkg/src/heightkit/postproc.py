"""Inference-time height post-processing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .raster import HeightMap, HierarchyMap


def _axis_weights(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centered linear sampling."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_array(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D array to ``(rows, cols)``, corners not aligned."""
    a = np.asarray(a, dtype=np.float64)
    rows, cols = size
    if rows < 1 or cols < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if a.shape == (rows, cols):
        return a.copy()
    r0, r1, fr = _axis_weights(a.shape[0], rows)
    c0, c1, fc = _axis_weights(a.shape[1], cols)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    # convex combinations can drift by one ulp; keep the output in range
    return np.clip(out, a.min(), a.max())


def _as_size(size) -> tuple[int, int]:
    if isinstance(size, int):
        return (size, size)
    return (int(size[0]), int(size[1]))


def resize_bilinear(hm: HeightMap, new_size) -> HeightMap:
    """Resize a height map; ``new_size`` is an int or ``(rows, cols)``."""
    size = _as_size(new_size)
    if hm.nodata is not None and not hm.valid.all():
        raise ValueError("resizing maps with nodata pixels is not supported")
    return HeightMap(resize_array(hm.data, size).astype(np.float32), hm.nodata)


def aggregate_multiscale(predictions: Sequence[HeightMap], target_size) -> HeightMap:
    """Pixelwise maximum of predictions resampled to a common grid."""
    if not predictions:
        raise ValueError("no predictions to aggregate")
    size = _as_size(target_size)
    stack = np.stack([resize_array(p.data, size) for p in predictions])
    return HeightMap(stack.max(axis=0).astype(np.float32))


def correct_heights(heights: HeightMap, seg: HierarchyMap, min_building_height: float = 3.0) -> HeightMap:
    """Zero heights below ``min_building_height`` where the segmentation says ground."""
    if heights.shape != seg.shape:
        raise ValueError(f"shape mismatch: {heights.shape} vs {seg.shape}")
    out = np.array(heights.data)
    kill = (seg.data == 0) & (out < min_building_height) & heights.valid
    out[kill] = 0.0
    return HeightMap(out, heights.nodata)
