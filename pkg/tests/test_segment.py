"""Box-prompted depth segmentation: Otsu split, nearest component, fallbacks.

The two-plateau cases have exact expected masks; the randomized suite
compares against a brute-force oracle (exhaustive threshold search + flood
fill) that shares no code with the implementation.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depict.layout import BBox
from depict.segment import (
    SEGMENTERS,
    InstanceMask,
    bbox_mask,
    make_segmenter,
    otsu_threshold,
    segment_instance,
)
from depict.shapes import bbox_window, rasterize_bbox

from strategies import bboxes


# --- InstanceMask invariants --------------------------------------------------


def test_mask_validates_dtype_and_rank():
    b = BBox(0.0, 0.0, 0.5, 0.5)
    with pytest.raises(ValueError, match="bool"):
        InstanceMask(values=np.zeros((8, 8), dtype=np.float64), bbox=b)
    with pytest.raises(ValueError, match="bool"):
        InstanceMask(values=np.zeros((2, 8, 8), dtype=np.bool_), bbox=b)


def test_mask_rejects_empty():
    with pytest.raises(ValueError, match="no foreground"):
        InstanceMask(values=np.zeros((8, 8), dtype=np.bool_), bbox=BBox(0, 0, 0.5, 0.5))


def test_mask_rejects_foreground_outside_box():
    m = np.zeros((8, 8), dtype=np.bool_)
    m[7, 7] = True  # box covers the top-left quadrant only
    with pytest.raises(ValueError, match="outside"):
        InstanceMask(values=m, bbox=BBox(0, 0, 0.5, 0.5))


# --- otsu -------------------------------------------------------------------


def _otsu_curve(values):
    """Between-class variance at every candidate edge, straight from the
    definition (explicit per-k sums; histogram arithmetic over bin centers)."""
    flat = np.asarray(values, float).ravel()
    counts, edges = np.histogram(flat, bins=256, range=(flat.min(), flat.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    var = np.full(256, -1.0)
    for k in range(256):
        w0 = counts[: k + 1].sum()
        w1 = counts[k + 1 :].sum()
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (counts[: k + 1] * centers[: k + 1]).sum() / w0
        mu1 = (counts[k + 1 :] * centers[k + 1 :]).sum() / w1
        var[k] = w0 * w1 * (mu0 - mu1) ** 2
    return var, edges


def _otsu_oracle(values):
    var, edges = _otsu_curve(values)
    return float(edges[int(np.argmax(var)) + 1])


def test_otsu_two_plateaus_splits_between():
    vals = np.array([0.2] * 10 + [0.8] * 10)
    t = otsu_threshold(vals)
    assert 0.2 < t < 0.8
    assert (vals > t).sum() == 10


def test_otsu_achieves_maximal_between_class_variance():
    # adjacent bins can tie to the last ulp, and summation order then decides
    # the argmax; so check the achieved variance, not the bin index
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(8, 200))
        vals = np.concatenate(
            [rng.normal(0.3, 0.05, n), rng.normal(0.7, 0.05, max(4, n // 2))]
        )
        t = otsu_threshold(vals)
        var, edges = _otsu_curve(vals)
        k = int(np.argmin(np.abs(edges[1:] - t)))
        assert edges[k + 1] == pytest.approx(t, abs=1e-12)  # t is a real edge
        assert var[k] >= var.max() * (1 - 1e-9)


def test_otsu_rejects_constant():
    with pytest.raises(ValueError, match="constant"):
        otsu_threshold(np.full(20, 0.5))


def test_otsu_unbalanced_classes():
    vals = np.array([0.1] * 99 + [0.9])
    t = otsu_threshold(vals)
    assert (vals > t).sum() == 1


# --- segment_instance ---------------------------------------------------------


def _plateau_scene():
    """Background 0.1; a bright 4x4 block (0.9) inside the prompt box."""
    depth = np.full((16, 16), 0.1)
    depth[4:8, 4:8] = 0.9
    box = BBox(2 / 16, 2 / 16, 10 / 16, 10 / 16)
    want = np.zeros((16, 16), dtype=bool)
    want[4:8, 4:8] = True
    return depth, box, want


def test_plateau_segmentation_is_exact():
    depth, box, want = _plateau_scene()
    mask = segment_instance(depth, box)
    assert np.array_equal(mask.values, want)


def test_two_objects_keeps_nearest():
    # two blocks in the box; the brighter (nearer) one wins even if smaller
    depth = np.full((16, 16), 0.05)
    depth[2:8, 2:8] = 0.5    # far, large
    depth[10:13, 10:13] = 0.9  # near, small
    mask = segment_instance(depth, BBox(0, 0, 1, 1))
    want = np.zeros((16, 16), dtype=bool)
    want[10:13, 10:13] = True
    assert np.array_equal(mask.values, want)


def test_uniform_window_falls_back_to_box():
    depth = np.full((16, 16), 0.42)
    box = BBox(0.25, 0.25, 0.75, 0.75)
    mask = segment_instance(depth, box)
    assert np.array_equal(mask.values, rasterize_bbox(box, (16, 16)))


def test_segmentation_confined_to_box():
    # bright structure outside the box must not leak in
    depth = np.full((16, 16), 0.1)
    depth[0:3, 0:3] = 1.0  # outside
    depth[6:9, 6:9] = 0.8  # inside
    box = BBox(4 / 16, 4 / 16, 12 / 16, 12 / 16)
    mask = segment_instance(depth, box)
    raster = rasterize_bbox(box, (16, 16))
    assert not (mask.values & ~raster).any()
    want = np.zeros((16, 16), dtype=bool)
    want[6:9, 6:9] = True
    assert np.array_equal(mask.values, want)


def test_translation_equivariance():
    rng = np.random.default_rng(7)
    patch = rng.uniform(0.5, 1.0, (5, 5))
    base = np.full((32, 32), 0.1)
    a = base.copy()
    a[4:9, 6:11] = patch
    b = base.copy()
    b[12:17, 14:19] = patch
    ma = segment_instance(a, BBox(4 / 32, 2 / 32, 13 / 32, 11 / 32))
    mb = segment_instance(b, BBox(12 / 32, 10 / 32, 21 / 32, 19 / 32))
    assert np.array_equal(ma.values[2:11, 4:13], mb.values[10:19, 12:21])


def test_diagonal_blocks_are_separate_components():
    # 4-connectivity: two blocks touching only at a corner must not merge
    depth = np.full((16, 16), 0.05)
    depth[4:7, 4:7] = 0.6
    depth[7:10, 7:10] = 0.9  # shares only the corner pixel boundary
    mask = segment_instance(depth, BBox(0, 0, 1, 1))
    want = np.zeros((16, 16), dtype=bool)
    want[7:10, 7:10] = True
    assert np.array_equal(mask.values, want)


def test_mean_depth_tie_prefers_larger_component():
    depth = np.full((16, 16), 0.05)
    depth[2:4, 2:4] = 0.9   # 4 px
    depth[8:12, 8:12] = 0.9  # 16 px, same mean
    mask = segment_instance(depth, BBox(0, 0, 1, 1))
    assert mask.values[9, 9] and not mask.values[2, 2]


def test_full_tie_prefers_earlier_pixel():
    depth = np.full((16, 16), 0.05)
    depth[2:4, 2:4] = 0.9    # first in row-major order
    depth[10:12, 10:12] = 0.9
    mask = segment_instance(depth, BBox(0, 0, 1, 1))
    assert mask.values[2, 2] and not mask.values[10, 10]


def test_rejects_non_2d_depth():
    with pytest.raises(ValueError, match="2-D"):
        segment_instance(np.zeros((3, 8, 8)), BBox(0, 0, 0.5, 0.5))


def _segment_oracle(depth, box):
    """Brute force: exhaustive-threshold Otsu + BFS flood fill, then pick the
    component with the largest mean (count, then first-pixel tiebreaks)."""
    i0, i1, j0, j1 = bbox_window(box, depth.shape)
    win = depth[i0 : i1 + 1, j0 : j1 + 1]
    if win.var() < 1e-6:
        return rasterize_bbox(box, depth.shape)
    t = _otsu_oracle(win)
    fg = win > t
    h, w = fg.shape
    seen = np.zeros_like(fg)
    comps = []
    for si in range(h):
        for sj in range(w):
            if fg[si, sj] and not seen[si, sj]:
                stack, cells = [(si, sj)], []
                seen[si, sj] = True
                while stack:
                    ci, cj = stack.pop()
                    cells.append((ci, cj))
                    for ni, nj in ((ci - 1, cj), (ci + 1, cj), (ci, cj - 1), (ci, cj + 1)):
                        if 0 <= ni < h and 0 <= nj < w and fg[ni, nj] and not seen[ni, nj]:
                            seen[ni, nj] = True
                            stack.append((ni, nj))
                comps.append(cells)
    best = max(
        comps,
        key=lambda cells: (
            np.mean([win[c] for c in cells]),
            len(cells),
            -min(c[0] * w + c[1] for c in cells),
        ),
    )
    mask = np.zeros(depth.shape, dtype=bool)
    for ci, cj in best:
        mask[i0 + ci, j0 + cj] = True
    return mask & rasterize_bbox(box, depth.shape)


def test_randomized_scenes_match_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(40):
        depth = rng.uniform(0.0, 0.3, (24, 24))
        # drop in 1-3 bright rectangles
        for _ in range(int(rng.integers(1, 4))):
            i, j = rng.integers(0, 18, 2)
            hh, ww = rng.integers(3, 7, 2)
            depth[i : i + hh, j : j + ww] = rng.uniform(0.6, 1.0)
        box = BBox(rng.uniform(0, 0.3), rng.uniform(0, 0.3),
                   rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        got = segment_instance(depth, box)
        want = _segment_oracle(depth, box)
        assert np.array_equal(got.values, want)


@settings(max_examples=60)
@given(bboxes(), st.integers(min_value=0, max_value=2**32 - 1))
def test_segmentation_always_confined_and_nonempty(box, seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0, 1, (32, 32))
    mask = segment_instance(depth, box)
    raster = rasterize_bbox(box, (32, 32))
    assert mask.values.any()
    assert not (mask.values & ~raster).any()


# --- pluggability ---------------------------------------------------------------


def test_bbox_mask_is_the_raster():
    box = BBox(0.1, 0.2, 0.6, 0.8)
    m = bbox_mask(box, (32, 32))
    assert np.array_equal(m.values, rasterize_bbox(box, (32, 32)))


def test_make_segmenter_kinds():
    depth = np.full((16, 16), 0.1)
    depth[4:8, 4:8] = 0.9
    box = BBox(2 / 16, 2 / 16, 10 / 16, 10 / 16)
    otsu = make_segmenter("otsu")(depth, box)
    raw = make_segmenter("bbox")(depth, box)
    assert otsu.values.sum() == 16  # the block
    assert np.array_equal(raw.values, rasterize_bbox(box, (16, 16)))
    assert set(SEGMENTERS) == {"otsu", "bbox"}
    with pytest.raises(ValueError, match="unknown segmenter"):
        make_segmenter("sam")
