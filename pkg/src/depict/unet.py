"""The small UNet denoiser shared by the depth (1ch) and RGB (3ch) models.

Levels run 64 -> 32 -> 16 -> 8 with two residual blocks per level. Cross
attention over caption tokens sits at the 16 and 8 resolutions (encoder,
middle, decoder: five sites total). Each site is exposed to callers as an
AttnSite whose `attend` closure runs this site's projections against an
arbitrary token sequence; that closure is what the per-instance detail
renderer and the hook-neutrality tests build on.

Conditioning entry points:
  - caption_ids: token ids attended to by default at every site.
  - control: per-level tensors added to encoder activations (control branch).
  - hook: replaces caption attention at every site (detail renderer).
  - adapter: per-site feature residual applied after attention (layout
    adapter); receives (site, features) and returns new features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .diffusion import AttentionInputs, cross_attention
from .vocab import PAD_ID, VOCAB_SIZE

LEVELS = (64, 32, 16, 8)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture table; serialized into checkpoints and validated on load."""

    in_channels: int = 1
    channels: tuple[int, int, int, int] = (32, 64, 96, 128)
    time_dim: int = 128
    token_dim: int = 64
    attn_heads: int = 4
    attn_head_dim: int = 16
    norm_groups: int = 8
    vocab_size: int = VOCAB_SIZE
    image_size: int = 64

    def __post_init__(self):
        # three downsamples, attention at /4 and /8
        if self.image_size < 8 or self.image_size % 8:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")

    @property
    def inner_dim(self) -> int:
        return self.attn_heads * self.attn_head_dim

    @property
    def attn_levels(self) -> tuple[int, int]:
        """Feature-map sizes at the cross-attention sites."""
        return (self.image_size // 4, self.image_size // 8)

    def table(self) -> dict:
        return asdict(self)


@dataclass
class AttnSite:
    """One cross-attention site, exposed during a forward pass.

    attend(token_ids) runs this site's Q/K/V projections over the given
    (B, L) token ids and returns the pre-output-projection attention result
    of shape (B, N_q, inner_dim). Padding ids are masked out of the keys
    unless a row is entirely padding (the null caption), in which case the
    single pad embedding stands in so the softmax stays defined.
    """

    name: str
    resolution: int
    attend: Callable[[torch.Tensor], torch.Tensor]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(timestep_embedding(t, self.dim))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttnBlock(nn.Module):
    """Multi-head cross-attention from spatial features to token embeddings."""

    def __init__(self, channels: int, cfg: ArchConfig, name: str, resolution: int):
        super().__init__()
        self.name = name
        self.resolution = resolution
        self.heads = cfg.attn_heads
        self.norm = nn.GroupNorm(cfg.norm_groups, channels)
        self.to_q = nn.Linear(channels, cfg.inner_dim, bias=False)
        self.to_k = nn.Linear(cfg.token_dim, cfg.inner_dim, bias=False)
        self.to_v = nn.Linear(cfg.token_dim, cfg.inner_dim, bias=False)
        self.to_out = nn.Linear(cfg.inner_dim, channels)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, -1).transpose(1, 2)  # (B, H, N, D)

    def forward(self, x, embed_tokens, caption_ids, hook=None):
        b, c, h, w = x.shape
        q_src = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, N_q, C)
        q = self._split(self.to_q(q_src))

        def attend(token_ids: torch.Tensor) -> torch.Tensor:
            emb = embed_tokens(token_ids)  # (B, L, token_dim)
            k = self._split(self.to_k(emb))
            v = self._split(self.to_v(emb))
            visible = token_ids != PAD_ID
            # Null caption: every id is padding; let the pad embedding carry it.
            visible = visible | (~visible.any(dim=-1, keepdim=True))
            out = cross_attention(
                AttentionInputs(q=q, k=k, v=v, key_mask=visible.unsqueeze(1))
            )
            return out.transpose(1, 2).reshape(b, h * w, -1)  # (B, N_q, inner)

        site = AttnSite(name=self.name, resolution=self.resolution, attend=attend)
        attn = hook(site) if hook is not None else attend(caption_ids)
        return x + self.to_out(attn).transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class UNetDenoiser(nn.Module):
    """Noise-prediction UNet. forward(z_t, t, caption_ids) -> eps_hat."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2, c3 = cfg.channels
        td, g = cfg.time_dim, cfg.norm_groups

        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.token_dim, padding_idx=PAD_ID)
        self.time_embed = TimeEmbed(td)
        self.stem = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)

        self.enc0 = nn.ModuleList([ResBlock(c0, c0, td, g), ResBlock(c0, c0, td, g)])
        self.down0 = Downsample(c0, c1)
        self.enc1 = nn.ModuleList([ResBlock(c1, c1, td, g), ResBlock(c1, c1, td, g)])
        self.down1 = Downsample(c1, c2)
        # site names are fixed identifiers (from the canonical 64-pixel raster);
        # the actual feature-map sizes follow cfg.image_size
        r4, r8 = cfg.attn_levels
        self.enc2 = nn.ModuleList([ResBlock(c2, c2, td, g), ResBlock(c2, c2, td, g)])
        self.attn_enc16 = CrossAttnBlock(c2, cfg, "enc16", r4)
        self.down2 = Downsample(c2, c3)
        self.enc3 = nn.ModuleList([ResBlock(c3, c3, td, g), ResBlock(c3, c3, td, g)])
        self.attn_enc8 = CrossAttnBlock(c3, cfg, "enc8", r8)

        self.mid1 = ResBlock(c3, c3, td, g)
        self.attn_mid8 = CrossAttnBlock(c3, cfg, "mid8", r8)
        self.mid2 = ResBlock(c3, c3, td, g)

        self.dec3 = nn.ModuleList([ResBlock(c3 + c3, c3, td, g), ResBlock(c3, c3, td, g)])
        self.attn_dec8 = CrossAttnBlock(c3, cfg, "dec8", r8)
        self.up2 = Upsample(c3, c2)
        self.dec2 = nn.ModuleList([ResBlock(c2 + c2, c2, td, g), ResBlock(c2, c2, td, g)])
        self.attn_dec16 = CrossAttnBlock(c2, cfg, "dec16", r4)
        self.up1 = Upsample(c2, c1)
        self.dec1 = nn.ModuleList([ResBlock(c1 + c1, c1, td, g), ResBlock(c1, c1, td, g)])
        self.up0 = Upsample(c1, c0)
        self.dec0 = nn.ModuleList([ResBlock(c0 + c0, c0, td, g), ResBlock(c0, c0, td, g)])

        self.out_norm = nn.GroupNorm(g, c0)
        self.out_conv = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _check_inputs(self, z_t, caption_ids):
        s = self.cfg.image_size
        if z_t.dim() != 4 or z_t.shape[1] != self.cfg.in_channels or z_t.shape[2:] != (s, s):
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, {s}, {s}) input, got {tuple(z_t.shape)}"
            )
        if caption_ids.shape[0] != z_t.shape[0]:
            raise ValueError("caption batch size mismatch")

    def forward(self, z_t, t, caption_ids, *, control=None, hook=None, adapter=None):
        self._check_inputs(z_t, caption_ids)
        dtype = self.out_conv.weight.dtype
        t = torch.as_tensor(np.asarray(t), device=z_t.device).to(dtype).reshape(-1)
        if t.shape[0] == 1 and z_t.shape[0] > 1:
            t = t.expand(z_t.shape[0])
        temb = self.time_embed(t)
        caption_ids = torch.as_tensor(caption_ids, dtype=torch.long, device=z_t.device)

        def run_attn(block, x):
            x = block(x, self.token_embed, caption_ids, hook=hook)
            if adapter is not None:
                x = adapter(AttnSite(block.name, block.resolution, attend=None), x)
            return x

        def add_control(x, level):
            if control is None:
                return x
            if level not in control:
                raise ValueError(f"control features missing level {level}")
            if control[level].shape != x.shape:
                raise ValueError(
                    f"control level {level}: shape {tuple(control[level].shape)} "
                    f"!= activations {tuple(x.shape)}"
                )
            return x + control[level]

        x = self.stem(z_t)
        for rb in self.enc0:
            x = rb(x, temb)
        x = skip0 = add_control(x, 64)
        x = self.down0(x)
        for rb in self.enc1:
            x = rb(x, temb)
        x = skip1 = add_control(x, 32)
        x = self.down1(x)
        for rb in self.enc2:
            x = rb(x, temb)
        x = run_attn(self.attn_enc16, x)
        x = skip2 = add_control(x, 16)
        x = self.down2(x)
        for rb in self.enc3:
            x = rb(x, temb)
        x = run_attn(self.attn_enc8, x)
        x = skip3 = add_control(x, 8)

        x = self.mid1(x, temb)
        x = run_attn(self.attn_mid8, x)
        x = self.mid2(x, temb)

        x = torch.cat([x, skip3], dim=1)
        x = self.dec3[0](x, temb)
        x = self.dec3[1](x, temb)
        x = run_attn(self.attn_dec8, x)
        x = self.up2(x)
        x = torch.cat([x, skip2], dim=1)
        x = self.dec2[0](x, temb)
        x = self.dec2[1](x, temb)
        x = run_attn(self.attn_dec16, x)
        x = self.up1(x)
        x = torch.cat([x, skip1], dim=1)
        x = self.dec1[0](x, temb)
        x = self.dec1[1](x, temb)
        x = self.up0(x)
        x = torch.cat([x, skip0], dim=1)
        x = self.dec0[0](x, temb)
        x = self.dec0[1](x, temb)

        return self.out_conv(nn.functional.silu(self.out_norm(x)))


def denoise(model: UNetDenoiser, z_t, t, caption_ids, *, control=None, hook=None, adapter=None):
    """Functional entry point over a parameter snapshot; see UNetDenoiser.forward."""
    return model(z_t, t, caption_ids, control=control, hook=hook, adapter=adapter)


def build_model(cfg: ArchConfig, seed: int = 0) -> UNetDenoiser:
    """Deterministically initialized model (torch RNG seeded from `seed`)."""
    torch.manual_seed(seed)
    return UNetDenoiser(cfg)


def freeze(model: nn.Module) -> nn.Module:
    """Mark every parameter non-trainable (the frozen-base contract)."""
    for p in model.parameters():
        p.requires_grad_(False)
    return model
