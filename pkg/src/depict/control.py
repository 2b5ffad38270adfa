"""Depth-conditioning branch for the RGB denoiser, plus its frequency filter.

The branch encodes a scene depth map into one feature tensor per UNet level;
the denoiser adds them to its encoder activations (addition only, no scale).
Output convolutions start at zero, so an untrained branch changes nothing.
All convolutions pad by reflection: a spatially constant depth map produces
spatially constant features at every level, with no border artifacts.

Before injection the two deepest levels (16, 8) may be low-pass filtered in
the frequency domain — an ideal radial mask with cutoff `rho` expressed as a
fraction of the Nyquist frequency. The hard mask keeps the filter algebra
exact: it is idempotent, band-nested, and can only remove energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .unet import LEVELS, ArchConfig

FILTERED_LEVELS = (16, 8)
DEFAULT_RHO = 0.5


@dataclass(frozen=True)
class FilterSpec:
    """Ideal radial low-pass with cutoff rho in (0, 1] (fraction of Nyquist)."""

    rho: float = DEFAULT_RHO
    shape: str = "ideal"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.shape != "ideal":
            raise ValueError(f"unknown filter shape {self.shape!r}")


def _rconv(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode="reflect")


class ControlResBlock(nn.Module):
    """Residual conv block without time conditioning (the branch is static)."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = _rconv(channels, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = _rconv(channels, channels)

    def forward(self, x):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return x + h


class ControlBranch(nn.Module):
    """Depth map (B, 1, 64, 64) in [0, 1] -> {level: feature tensor}.

    Feature shapes match the RGB denoiser's encoder-level activations:
    {64: (B, c0, 64, 64), 32: (B, c1, 32, 32), 16: (B, c2, 16, 16),
     8: (B, c3, 8, 8)} for channel widths (c0, c1, c2, c3).
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2, c3 = cfg.channels
        g = cfg.norm_groups
        self.stem = _rconv(1, c0)
        self.block64 = ControlResBlock(c0, g)
        self.down0 = _rconv(c0, c1, stride=2)
        self.block32 = ControlResBlock(c1, g)
        self.down1 = _rconv(c1, c2, stride=2)
        self.block16 = ControlResBlock(c2, g)
        self.down2 = _rconv(c2, c3, stride=2)
        self.block8 = ControlResBlock(c3, g)
        self.outs = nn.ModuleDict(
            {
                str(level): nn.Conv2d(c, c, 1)
                for level, c in zip(LEVELS, cfg.channels)
            }
        )
        for conv in self.outs.values():
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, depth: torch.Tensor) -> dict[int, torch.Tensor]:
        s = self.cfg.image_size
        if depth.dim() != 4 or depth.shape[1:] != (1, s, s):
            raise ValueError(f"expected (B, 1, {s}, {s}) depth map, got {tuple(depth.shape)}")
        x = depth * 2.0 - 1.0
        x = self.block64(self.stem(x))
        feats = {64: self.outs["64"](x)}
        x = self.block32(self.down0(x))
        feats[32] = self.outs["32"](x)
        x = self.block16(self.down1(x))
        feats[16] = self.outs["16"](x)
        x = self.block8(self.down2(x))
        feats[8] = self.outs["8"](x)
        return feats


def encode_control(branch: ControlBranch, depth: torch.Tensor) -> dict[int, torch.Tensor]:
    return branch(depth)


def build_control_branch(cfg: ArchConfig, seed: int = 0) -> ControlBranch:
    torch.manual_seed(seed)
    return ControlBranch(cfg)


def fft_lowpass(field: torch.Tensor, filter_spec: FilterSpec) -> torch.Tensor:
    """Ideal radial low-pass over the trailing (H, W) dimensions.

    A frequency bin at centered coordinates (u, v) survives iff
    sqrt((u/u_N)^2 + (v/v_N)^2) <= rho, u_N/v_N the per-axis Nyquist.
    rho = 1 short-circuits to the exact identity: corner bins sit at radius
    up to sqrt(2), so the literal mask at rho = 1 would not be all-pass.
    """
    h, w = field.shape[-2], field.shape[-1]
    if h < 2 or w < 2:
        raise ValueError(f"field must be at least 2x2, got {h}x{w}")
    if filter_spec.rho == 1.0:
        return field
    fy = torch.fft.fftfreq(h, dtype=torch.float64, device=field.device) * 2.0
    fx = torch.fft.fftfreq(w, dtype=torch.float64, device=field.device) * 2.0
    radius = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = (radius <= filter_spec.rho).to(field.dtype)
    out = torch.fft.ifft2(torch.fft.fft2(field) * mask)
    residue = float(out.imag.abs().max())
    if residue >= 1e-5:
        raise RuntimeError(f"imaginary residue {residue:.3e} exceeds 1e-5")
    return out.real


def filter_control(
    features: dict[int, torch.Tensor],
    filter_spec: FilterSpec,
    levels: tuple[int, ...] = FILTERED_LEVELS,
) -> dict[int, torch.Tensor]:
    """Filtered copy of a control feature dict; untouched levels pass through."""
    return {
        level: fft_lowpass(f, filter_spec) if level in levels else f
        for level, f in features.items()
    }


def inject(activations: torch.Tensor, control: torch.Tensor) -> torch.Tensor:
    """Control injection is plain addition; shape mismatch is a caller bug."""
    if activations.shape != control.shape:
        raise ValueError(
            f"control shape {tuple(control.shape)} != activations {tuple(activations.shape)}"
        )
    return activations + control
