"""Rasterization of the four filled primitives, inscribed in a bbox.

Masks are area-true: the pixel count equals the primitive's analytic area
rounded to the nearest pixel. Pixels are ranked by (supersampled) coverage
and the top round(area) of them form the mask, so quantization never
accumulates along the boundary the way a fixed coverage threshold does.
"""

from __future__ import annotations

import math

import numpy as np

from .layout import BBox

_SS = 4  # subsamples per pixel axis; coverage granularity 1/16

_grid_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _subpixel_grid(h: int, w: int):
    key = (h, w)
    if key not in _grid_cache:
        off = (np.arange(_SS) + 0.5) / _SS
        ys = ((np.arange(h)[:, None] + off[None, :]).reshape(-1)) / h
        xs = ((np.arange(w)[:, None] + off[None, :]).reshape(-1)) / w
        _grid_cache[key] = np.meshgrid(ys, xs, indexing="ij")
    return _grid_cache[key]


def _region(shape: str, bbox: BBox, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    cx, cy = (bbox.x0 + bbox.x1) / 2, (bbox.y0 + bbox.y1) / 2
    rx, ry = bbox.width / 2, bbox.height / 2
    if shape == "square":
        return (X >= bbox.x0) & (X < bbox.x1) & (Y >= bbox.y0) & (Y < bbox.y1)
    if shape == "triangle":
        # Isoceles: apex at top-center, base along the bottom edge.
        t = (Y - bbox.y0) / bbox.height
        inside_box = (X >= bbox.x0) & (X < bbox.x1) & (Y >= bbox.y0) & (Y < bbox.y1)
        return inside_box & (np.abs(X - cx) <= t * rx)
    r2 = ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2
    if shape == "circle":
        return r2 <= 1.0
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.25)
    raise ValueError(f"unknown shape {shape!r}")


def analytic_area(shape: str, bbox: BBox) -> float:
    """Exact primitive area as a fraction of the image."""
    a = bbox.area
    if shape == "square":
        return a
    if shape == "triangle":
        return a / 2
    if shape == "circle":
        return math.pi / 4 * a
    if shape == "ring":
        return 3 * math.pi / 16 * a  # outer ellipse minus the half-scale hole
    raise ValueError(f"unknown shape {shape!r}")


def rasterize_bbox(bbox: BBox, hw: tuple[int, int]) -> np.ndarray:
    """Cell-center rasterization of a bbox onto an (H, W) grid, never empty.

    A cell belongs to the box iff its center lies in [x0, x1] x [y0, y1].
    A box too thin to cover any center claims the single cell nearest its
    center, so downstream consumers (adapter masks, segmentation windows)
    always have at least one cell to work with.
    """
    h, w = hw
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    rows = (ys >= bbox.y0) & (ys <= bbox.y1)
    cols = (xs >= bbox.x0) & (xs <= bbox.x1)
    mask = rows[:, None] & cols[None, :]
    if not mask.any():
        ci = min(h - 1, max(0, int((bbox.y0 + bbox.y1) / 2 * h)))
        cj = min(w - 1, max(0, int((bbox.x0 + bbox.x1) / 2 * w)))
        mask[ci, cj] = True
    return mask


def bbox_window(bbox: BBox, hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """(i0, i1, j0, j1) inclusive row/col bounds of rasterize_bbox's support."""
    mask = rasterize_bbox(bbox, hw)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def primitive_mask(shape: str, bbox: BBox, hw: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Boolean (H, W) mask of the primitive inscribed in bbox.

    The "inscribed" convention is anisotropic: a circle in a non-square box
    becomes the inscribed ellipse, a square fills the box. Pixel count is
    round(analytic area in pixels), clamped to the covered support.
    """
    h, w = hw
    Y, X = _subpixel_grid(h, w)
    sub = _region(shape, bbox, X, Y)
    coverage = sub.reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    n_target = round(analytic_area(shape, bbox) * h * w)
    n_target = min(n_target, int(np.count_nonzero(coverage)))
    mask = np.zeros((h, w), dtype=bool)
    if n_target > 0:
        order = np.argsort(-coverage.reshape(-1), kind="stable")
        mask.reshape(-1)[order[:n_target]] = True
    return mask
