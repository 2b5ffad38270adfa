"""Noise fields for diffusion training: white Gaussian and pyramid noise.

Pyramid noise sums white noise drawn at progressively coarser grids and
bilinearly upsampled back to full resolution, so adjacent pixels share
low-frequency components. A model trained to predict it has to commit to
coherent large structures instead of averaging independent pixels.

All sampling goes through an explicitly passed numpy Generator
(np.random.default_rng, PCG64), one generator per worker. Given the same
seed the stream is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_LEVELS = 4
DEFAULT_DECAY = 0.8

# Per-axis variance gain of wrap-boundary bilinear upsampling by 2**k,
# i.e. the mean over output phases of f^2 + (1-f)^2. Estimated by Monte
# Carlo (scripts/calibrate_upsample_gain.py) and frozen; the script also
# checks the values against the closed form. Converges to 2/3 from below.
_AXIS_GAIN = (
    1.0,  # k=0: identity
    0.6250000000,  # k=1
    0.6562500000,  # k=2
    0.6640625000,  # k=3
    0.6660156250,  # k=4
    0.6665039062,  # k=5
    0.6666259766,  # k=6
    0.6666564941,  # k=7
    0.6666641235,  # k=8
)


@dataclass(eq=False)
class NoiseField:
    """A sampled noise realization plus the settings that produced it."""

    values: np.ndarray  # (C, H, W) float64
    kind: str  # "gaussian" | "pyramid"
    levels: int = 1
    decay: float = 1.0


def _require_pow2(shape: tuple[int, int, int]):
    if len(shape) != 3:
        raise ValueError(f"expected (C, H, W), got {shape}")
    c, h, w = shape
    if c < 1:
        raise ValueError(f"channel count must be >= 1, got {c}")
    for n, name in ((h, "H"), (w, "W")):
        if n < 1 or n & (n - 1):
            raise ValueError(f"{name}={n} is not a power of two")


def gaussian_noise(shape: tuple[int, int, int], rng: np.random.Generator) -> NoiseField:
    """i.i.d. standard normal field."""
    _require_pow2(shape)
    return NoiseField(values=rng.standard_normal(shape), kind="gaussian")


def pyramid_noise(
    shape: tuple[int, int, int],
    rng: np.random.Generator,
    levels: int = DEFAULT_LEVELS,
    decay: float = DEFAULT_DECAY,
) -> NoiseField:
    """Sum of decaying upsampled white-noise octaves, normalized to unit variance.

    field = sum_k decay^k * upsample(G_k) with G_k white at (H/2^k, W/2^k),
    k = 0..levels-1, divided by sqrt(sum_k decay^(2k) u_k) where u_k is the
    per-level variance gain of the upsampler (frozen table above).
    """
    _require_pow2(shape)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    c, h, w = shape
    if 1 << (levels - 1) > min(h, w):
        raise ValueError(f"levels={levels} too deep for {h}x{w} (needs 2^(levels-1) <= min side)")

    acc = rng.standard_normal(shape)
    norm_sq = 1.0
    for k in range(1, levels):
        hk, wk = h >> k, w >> k
        g = rng.standard_normal((c, hk, wk))
        acc += decay**k * upsample_bilinear(g, (h, w))
        norm_sq += decay ** (2 * k) * _level_gain(k, hk, wk)
    return NoiseField(values=acc / math.sqrt(norm_sq), kind="pyramid", levels=levels, decay=decay)


def _level_gain(k: int, src_h: int, src_w: int) -> float:
    # A 1x1 source upsamples to a constant field: gain 1 on that axis.
    gh = 1.0 if src_h == 1 else _AXIS_GAIN[k]
    gw = 1.0 if src_w == 1 else _AXIS_GAIN[k]
    return gh * gw


def _axis_weights(src: int, dst: int):
    j = np.arange(dst)
    p = (j + 0.5) * (src / dst) - 0.5
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    return i0 % src, (i0 + 1) % src, 1.0 - f, f


def upsample_bilinear(values: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with wrap (circular) boundary, half-pixel centers.

    Wrap keeps the interpolation weights shift-invariant, so the variance of
    upsampled white noise is near-flat across the field; edge clamping would
    inflate border variance.
    """
    c, h, w = values.shape
    out_h, out_w = out_hw
    if out_h % h or out_w % w:
        raise ValueError(f"output {out_hw} must be an integer multiple of input {(h, w)}")
    i0, i1, wy0, wy1 = _axis_weights(h, out_h)
    rows = values[:, i0, :] * wy0[None, :, None] + values[:, i1, :] * wy1[None, :, None]
    j0, j1, wx0, wx1 = _axis_weights(w, out_w)
    return rows[:, :, j0] * wx0[None, None, :] + rows[:, :, j1] * wx1[None, None, :]
