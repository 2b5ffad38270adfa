"""Regenerate the frozen variance-gain table in depict.noise.

The pyramid-noise normalizer needs the per-level variance gain of the
wrap-boundary bilinear upsampler. This script estimates each gain by Monte
Carlo (upsample white noise, measure pooled per-pixel variance) and compares
against the closed form: per axis, the gain is the mean over the output
phase pattern of f^2 + (1-f)^2, and the 2-D gain is the product of the two
axis gains.

Run: python scripts/calibrate_upsample_gain.py
"""

import numpy as np

from depict.noise import _AXIS_GAIN, upsample_bilinear


def axis_gain_closed_form(factor: int) -> float:
    j = np.arange(factor)
    p = (j + 0.5) / factor - 0.5
    f = p - np.floor(p)
    return float(np.mean(f**2 + (1 - f) ** 2))


def axis_gain_monte_carlo(k: int, rng, n_fields: int = 400, src: int = 8) -> float:
    factor = 1 << k
    var_acc = 0.0
    for _ in range(n_fields):
        g = rng.standard_normal((16, src, src))
        up = upsample_bilinear(g, (src * factor, src * factor))
        var_acc += float(np.mean(up**2))
    gain_2d = var_acc / n_fields
    return float(np.sqrt(gain_2d))


def main():
    rng = np.random.default_rng(7)
    print(f"{'k':>2} {'factor':>6} {'closed form':>14} {'monte carlo':>14} {'frozen':>14}")
    for k in range(len(_AXIS_GAIN)):
        cf = axis_gain_closed_form(1 << k)
        mc = axis_gain_monte_carlo(k, rng) if k <= 5 else cf  # big factors: MC too slow
        frozen = _AXIS_GAIN[k]
        flag = "" if abs(cf - frozen) < 5e-7 else "  <-- STALE"
        print(f"{k:>2} {1 << k:>6} {cf:>14.10f} {mc:>14.10f} {frozen:>14.10f}{flag}")


if __name__ == "__main__":
    main()
