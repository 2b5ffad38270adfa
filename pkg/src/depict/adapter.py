"""Layout adapter: gated per-instance attention residuals on a frozen base.

Each instance becomes a single conditioning token (mean-pooled phrase
embedding concatenated with projected bbox Fourier features). At every
cross-attention site the feature queries attend to each instance token
separately; the result is zeroed outside the instance's rasterized bbox,
summed over instances, scaled by tanh(gate), and added to the features.
Gates start at exactly zero, so a fresh adapter is a no-op and the base
model's behavior is untouched until training moves the gates.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffusion import AttentionInputs, cross_attention
from .layout import BBox, Layout, encode_tokens
from .shapes import rasterize_bbox
from .unet import ArchConfig, UNetDenoiser

FOURIER_FREQS = 8  # k = 0..7 -> sin/cos(2^k pi u) per coordinate


def embed_bbox(bbox: BBox) -> np.ndarray:
    """64-dim Fourier features: [sin, cos](2^k pi u) for u in (x0, y0, x1, y1).

    Slot layout: coordinate-major, then k, then (sin, cos); i.e. slot
    (16*u_idx + 2*k) holds sin, slot (16*u_idx + 2*k + 1) holds cos.
    """
    out = np.empty(4 * FOURIER_FREQS * 2, dtype=np.float64)
    for u_idx, u in enumerate((bbox.x0, bbox.y0, bbox.x1, bbox.y1)):
        for k in range(FOURIER_FREQS):
            arg = (1 << k) * np.pi * u
            out[16 * u_idx + 2 * k] = np.sin(arg)
            out[16 * u_idx + 2 * k + 1] = np.cos(arg)
    return out


class SiteAdapter(nn.Module):
    """Q/K/V projections plus the scalar gate for one attention site."""

    def __init__(self, channels: int, token_dim: int, d_k: int = 64):
        super().__init__()
        self.w_q = nn.Linear(channels, d_k, bias=False)
        self.w_k = nn.Linear(2 * token_dim, d_k, bias=False)
        self.w_v = nn.Linear(2 * token_dim, channels, bias=False)
        self.gate = nn.Parameter(torch.zeros(()))


class LayoutAdapter(nn.Module):
    """Adapter parameters for every cross-attention site of a UNetDenoiser."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c2, c3 = cfg.channels[2], cfg.channels[3]
        level_channels = {16: c2, 8: c3}
        self.bbox_proj = nn.Linear(4 * FOURIER_FREQS * 2, cfg.token_dim)
        self.sites = nn.ModuleDict(
            {
                name: SiteAdapter(level_channels[res], cfg.token_dim)
                for name, res in (
                    ("enc16", 16),
                    ("enc8", 8),
                    ("mid8", 8),
                    ("dec8", 8),
                    ("dec16", 16),
                )
            }
        )
        self._mask_cache: dict = {}

    def instance_tokens(self, layout: Layout, token_embed: nn.Embedding) -> torch.Tensor:
        """(n, 2*token_dim) conditioning tokens, one per instance."""
        dtype = self.bbox_proj.weight.dtype
        rows = []
        for spec in layout.instances:
            ids = [i for i in encode_tokens(spec.phrase) if i != 0]
            if not ids:
                raise ValueError(f"instance phrase {spec.phrase!r} has no tokens")
            emb = token_embed(torch.as_tensor(ids, dtype=torch.long)).mean(dim=0)
            four = torch.as_tensor(embed_bbox(spec.bbox), dtype=dtype)
            rows.append(torch.cat([emb.to(dtype), self.bbox_proj(four)]))
        return torch.stack(rows)

    def _level_mask(self, bbox: BBox, resolution: int, dtype) -> torch.Tensor:
        key = (bbox, resolution, dtype)
        if key not in self._mask_cache:
            m = rasterize_bbox(bbox, (resolution, resolution)).reshape(-1)
            self._mask_cache[key] = torch.as_tensor(m, dtype=dtype).unsqueeze(-1)
        return self._mask_cache[key]

    def site_apply(
        self,
        name: str,
        resolution: int,
        features: torch.Tensor,
        per_sample: list[tuple[torch.Tensor, tuple[BBox, ...]]],
    ) -> torch.Tensor:
        """instance_attention at one site: gated, bbox-masked residual."""
        if resolution not in self.cfg.attn_levels:
            raise ValueError(f"no adapter site at resolution {resolution}")
        site: SiteAdapter = self.sites[name]
        b, c, h, w = features.shape
        if len(per_sample) != b:
            raise ValueError("need one (tokens, boxes) pair per sample")
        q_all = site.w_q(features.reshape(b, c, h * w).transpose(1, 2))  # (B, N_q, d_k)
        residual = torch.zeros_like(features)
        for i, (itoks, boxes) in enumerate(per_sample):
            n = len(boxes)
            if n == 0:
                continue
            k = site.w_k(itoks).unsqueeze(1)  # (n, 1, d_k)
            v = site.w_v(itoks).unsqueeze(1)  # (n, 1, C)
            q = q_all[i].unsqueeze(0).expand(n, -1, -1)
            attn = cross_attention(AttentionInputs(q=q, k=k, v=v))  # (n, N_q, C)
            masks = torch.stack(
                [self._level_mask(box, resolution, features.dtype) for box in boxes]
            )
            summed = (attn * masks).sum(dim=0)  # (N_q, C)
            residual[i] = summed.transpose(0, 1).reshape(c, h, w)
        return features + torch.tanh(site.gate) * residual


def prepare_conditioning(
    adapter: LayoutAdapter, layouts: list[Layout], token_embed: nn.Embedding
) -> list[tuple[torch.Tensor, tuple[BBox, ...]]]:
    return [
        (adapter.instance_tokens(lay, token_embed), tuple(s.bbox for s in lay.instances))
        for lay in layouts
    ]


def adapted_forward(
    model: UNetDenoiser,
    adapter: LayoutAdapter,
    z_t,
    t,
    caption_ids,
    layouts: list[Layout],
    *,
    control=None,
    hook=None,
):
    """One layout-conditioned denoiser call: base weights plus adapter residuals."""
    per_sample = prepare_conditioning(adapter, layouts, model.token_embed)

    def adapter_fn(site, features):
        return adapter.site_apply(site.name, site.resolution, features, per_sample)

    return model(z_t, t, caption_ids, control=control, hook=hook, adapter=adapter_fn)


def apply_adapter(model: UNetDenoiser, adapter: LayoutAdapter, layout: Layout):
    """Bind one layout: returns call(z_t, t, caption_ids, **kw) -> eps_hat."""

    def call(z_t, t, caption_ids, **kw):
        return adapted_forward(
            model, adapter, z_t, t, caption_ids, [layout] * z_t.shape[0], **kw
        )

    return call
