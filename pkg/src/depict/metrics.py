"""Layout-adherence and attribute metrics over generated images.

Scoring is oracle-based: instance position is measured by IoU between a
segmented region and the target primitive rasterized from the layout, and
attribute correctness by the mean color of that region against a fixed
hue/saturation/value bin table. IASR counts instance-level successes over
all instances; ISR counts images in which every instance succeeds.
"""

from __future__ import annotations

import colorsys
from collections.abc import Sequence

import numpy as np

IOU_THRESHOLD = 0.5

# Mean-color bins. Low saturation resolves by value (white/gray); saturated
# colors resolve by hue (degrees); everything else is "none". Red wraps
# around zero and owns the exact 20-degree boundary.
SAT_GRAY_MAX = 0.15
SAT_COLOR_MIN = 0.4
VAL_COLOR_MIN = 0.3
VAL_WHITE_MIN = 0.85
VAL_GRAY_MIN = 0.3
HUE_BINS = (  # (label, lo, hi): lo < hue <= hi after the red check
    ("orange", 20.0, 50.0),
    ("yellow", 50.0, 75.0),
    ("green", 75.0, 165.0),
    ("blue", 165.0, 255.0),
    ("purple", 255.0, 340.0),
)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty union scores 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


def miou(pred_masks: Sequence[np.ndarray], target_masks: Sequence[np.ndarray]) -> float:
    """Mean per-instance IoU; instance lists must align."""
    if len(pred_masks) != len(target_masks):
        raise ValueError(f"{len(pred_masks)} predictions vs {len(target_masks)} targets")
    if not pred_masks:
        raise ValueError("no instances to score")
    return float(np.mean([iou(p, t) for p, t in zip(pred_masks, target_masks)]))


def classify_color(image: np.ndarray, mask: np.ndarray) -> str:
    """Color word for the mean RGB over mask pixels, or "none".

    image is (3, H, W) in [0, 1]; mask is (H, W) binary. An empty mask
    classifies as "none".
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != mask.shape:
        raise ValueError(f"need (3, H, W) image matching mask {mask.shape}, got {image.shape}")
    if not mask.any():
        return "none"
    r, g, b = (float(channel[mask].mean()) for channel in image)
    hue, sat, val = colorsys.rgb_to_hsv(r, g, b)
    hue *= 360.0
    if sat < SAT_GRAY_MAX:
        if val >= VAL_WHITE_MIN:
            return "white"
        if val >= VAL_GRAY_MIN:
            return "gray"
        return "none"
    if sat < SAT_COLOR_MIN or val < VAL_COLOR_MIN:
        return "none"
    if hue >= 340.0 or hue <= 20.0:
        return "red"
    for label, lo, hi in HUE_BINS:
        if lo < hue <= hi:
            return label
    return "none"


def iasr(verdicts: Sequence[Sequence[bool]]) -> float:
    """Instance attribute success ratio: successes over all instances."""
    total = sum(len(image) for image in verdicts)
    if total == 0:
        raise ValueError("no instances to score")
    return sum(sum(bool(v) for v in image) for image in verdicts) / total


def isr(verdicts: Sequence[Sequence[bool]]) -> float:
    """Image success ratio: images where every instance succeeded."""
    if not verdicts:
        raise ValueError("no images to score")
    return sum(all(image) and len(image) > 0 for image in verdicts) / len(verdicts)
