"""Box-prompted instance segmentation on a scene depth map.

The default segmenter thresholds the depth values inside the box (Otsu over
a 256-bin histogram, foreground strictly above the threshold — near is
bright) and keeps the 4-connected component with the largest mean depth:
the nearest object in the box. This is the pluggable stand-in for a real
promptable segmentation model; anything honoring the same contract
(mask inside the rasterized box, never empty) can replace it.

Fallbacks are defined, not guessed: a box whose depth window is uniform
(variance < 1e-6) yields the full rasterized box, matching the renderer's
own box-mask fallback so degradation is graceful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .layout import BBox
from .shapes import bbox_window, rasterize_bbox

UNIFORM_VARIANCE = 1e-6
OTSU_BINS = 256


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Binary H×W mask plus the box that prompted it.

    Invariants (checked on construction): every foreground pixel lies inside
    the pixel-rasterized box, and there is at least one foreground pixel.
    """

    values: np.ndarray
    bbox: BBox

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.dtype != np.bool_:
            raise ValueError(f"mask must be a 2-D bool array, got {v.dtype} {v.shape}")
        if not v.any():
            raise ValueError("mask has no foreground pixels")
        raster = rasterize_bbox(self.bbox, v.shape)
        if (v & ~raster).any():
            raise ValueError("mask has foreground outside the rasterized bbox")


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Histogram threshold maximizing between-class variance.

    Returns the upper edge of the chosen bin; callers treat foreground as
    strictly above it. Only splits with both classes non-empty compete, and
    variance ties go to the lowest threshold (deterministic argmax).
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        raise ValueError("cannot threshold a constant window")
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(counts)  # pixels in bins <= k
    w1 = w0[-1] - w0
    mass = np.cumsum(counts * centers)
    with np.errstate(invalid="ignore"):
        mu0 = mass / w0
        mu1 = (mass[-1] - mass) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0  # only real splits compete
    return float(edges[int(np.argmax(between)) + 1])


def _nearest_component(window: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Largest-mean-depth 4-connected component of fg within the window."""
    labels, n = ndimage.label(fg)  # default structure = 4-connectivity
    if n == 1:
        return fg
    ids = np.arange(1, n + 1)
    means = ndimage.mean(window, labels=labels, index=ids)
    counts = ndimage.sum_labels(fg, labels=labels, index=ids)
    # Ties on mean depth: larger component, then earlier row-major pixel.
    first = np.empty(n, dtype=np.int64)
    flat_labels = labels.ravel()
    for i in ids:
        first[i - 1] = int(np.argmax(flat_labels == i))
    order = sorted(ids, key=lambda i: (-means[i - 1], -counts[i - 1], first[i - 1]))
    return labels == order[0]


def segment_instance(depth: np.ndarray, bbox: BBox) -> InstanceMask:
    """Segment the nearest object inside bbox on a near-is-bright depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {depth.shape}")
    i0, i1, j0, j1 = bbox_window(bbox, depth.shape)
    window = depth[i0 : i1 + 1, j0 : j1 + 1]
    if float(window.var()) < UNIFORM_VARIANCE:
        return bbox_mask(bbox, depth.shape)
    fg = window > otsu_threshold(window)
    mask = np.zeros(depth.shape, dtype=np.bool_)
    mask[i0 : i1 + 1, j0 : j1 + 1] = _nearest_component(window, fg)
    # Clip to the raster: window cells and raster cells coincide for the
    # half-open rasterization rule, but keep the invariant locally enforced.
    mask &= rasterize_bbox(bbox, depth.shape)
    return InstanceMask(values=mask, bbox=bbox)


def bbox_mask(bbox: BBox, hw: tuple[int, int]) -> InstanceMask:
    """Segmentation bypass: the rasterized box itself is the mask."""
    return InstanceMask(values=rasterize_bbox(bbox, hw), bbox=bbox)


SEGMENTERS = ("otsu", "bbox")


def make_segmenter(kind: str):
    """segment(depth, bbox) -> InstanceMask for a named segmenter kind."""
    if kind == "otsu":
        return segment_instance
    if kind == "bbox":
        return lambda depth, bbox: bbox_mask(bbox, np.asarray(depth).shape[-2:])
    raise ValueError(f"unknown segmenter {kind!r}; choose from {SEGMENTERS}")
