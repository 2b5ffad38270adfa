"""Training-free per-instance detail rendering at cross-attention sites.

At every attention site the hook renders each instance with its own phrase
(attention against instance tokens instead of the global caption), renders
the background with the caption, and merges the n+1 results per query
position with softmax weights over logit masks: alpha inside an instance's
segmentation mask, a large negative sentinel outside, and a uniform
background logit beta. Inside exactly one mask the owning instance wins
with weight 1/(1 + n·e^(beta-alpha)); where no mask covers, the background
weight is exactly one. Masks come from the stage-1 depth map, are built
once per image, and are reused at every timestep and site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .layout import Layout, encode_tokens
from .segment import InstanceMask
from .shapes import rasterize_bbox
from .unet import AttnSite

DEFAULT_ALPHA = 10.0
DEFAULT_BETA = 0.0
NEG_INF = -1e9


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    neg_inf: float = NEG_INF

    def __post_init__(self):
        if not self.alpha > self.beta:
            raise ValueError(f"alpha must exceed beta, got {self.alpha} <= {self.beta}")
        if not self.neg_inf <= -1e8:
            raise ValueError(f"neg_inf sentinel must be <= -1e8, got {self.neg_inf}")


@dataclass
class RenderSet:
    """Per-site render bundle: n instance renders, one caption render, logits.

    instance_renders[i] and caption_render are (..., N_q, d_v) and must share
    shape; instance_logits is (n, N_q), caption_logits (N_q,). Instance order
    is the layout's instance order and defines the softmax slots.
    """

    instance_renders: tuple[torch.Tensor, ...]
    caption_render: torch.Tensor
    instance_logits: torch.Tensor
    caption_logits: torch.Tensor

    def __post_init__(self):
        n = len(self.instance_renders)
        if self.instance_logits.shape[0] != n:
            raise ValueError(
                f"{n} renders but {self.instance_logits.shape[0]} logit rows"
            )
        for r in self.instance_renders:
            if r.shape != self.caption_render.shape:
                raise ValueError("all renders must share the caption render's shape")
        n_q = self.caption_render.shape[-2]
        if self.caption_logits.shape != (n_q,) or (
            n and self.instance_logits.shape[1] != n_q
        ):
            raise ValueError("logit length must equal the query count")


def render_instance(site: AttnSite, phrase_ids: torch.Tensor) -> torch.Tensor:
    """Attention output for one instance's phrase at this site."""
    phrase_ids = torch.as_tensor(phrase_ids, dtype=torch.long)
    if phrase_ids.dim() == 1:
        phrase_ids = phrase_ids.unsqueeze(0)
    if not (phrase_ids != 0).any():
        raise ValueError("cannot render an empty phrase")
    return site.attend(phrase_ids)


def downsample_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Max-pool a 64x64 mask to resolution x resolution (any covered -> 1)."""
    h, w = mask.shape
    if h % resolution or w % resolution:
        raise ValueError(f"resolution {resolution} must divide mask shape {mask.shape}")
    fy, fx = h // resolution, w // resolution
    return mask.reshape(resolution, fy, resolution, fx).any(axis=(1, 3))


def build_logit_masks(
    masks: list[InstanceMask], resolution: int, config: MergeConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """(n, N_q) instance logits and (N_q,) background logits at one site.

    Masks are max-pooled to the site grid and flattened row-major; cells
    inside get alpha, outside the sentinel. The background logit is beta at
    every position, covered or not. A mask that somehow pools to all-zero
    falls back to the instance's rasterized box at site resolution.
    """
    n_q = resolution * resolution
    rows = np.full((len(masks), n_q), config.neg_inf, dtype=np.float64)
    for i, m in enumerate(masks):
        cells = downsample_mask(m.values, resolution)
        if not cells.any():  # unreachable for valid masks; keep the net anyway
            cells = rasterize_bbox(m.bbox, (resolution, resolution))
        rows[i, cells.reshape(n_q)] = config.alpha
    instance_logits = torch.as_tensor(rows)
    caption_logits = torch.full((n_q,), config.beta, dtype=torch.float64)
    return instance_logits, caption_logits


def merge_weights(
    instance_logits: torch.Tensor, caption_logits: torch.Tensor
) -> torch.Tensor:
    """(n+1, N_q) softmax weights per query position; caption row last."""
    logits = torch.cat([instance_logits, caption_logits.unsqueeze(0)])
    return torch.softmax(logits, dim=0)


def merge(rs: RenderSet) -> torch.Tensor:
    """Per-position convex combination of the n+1 renders."""
    weights = merge_weights(rs.instance_logits, rs.caption_logits)
    weights = weights.to(rs.caption_render.dtype)
    out = weights[-1].unsqueeze(-1) * rs.caption_render
    for i, r in enumerate(rs.instance_renders):
        out = out + weights[i].unsqueeze(-1) * r
    return out


def make_renderer_hook(layout: Layout, masks: list[InstanceMask], config: MergeConfig):
    """Per-site attention replacement for the RGB sampler.

    The returned hook(site) renders every instance and the caption through
    the site's own projections and merges them. Logit masks are built once
    per attention resolution on first use, so per-call work is the attends.
    """
    if len(masks) != len(layout.instances):
        raise ValueError(
            f"{len(layout.instances)} instances but {len(masks)} masks"
        )
    phrase_ids = [
        torch.as_tensor(encode_tokens(spec.phrase), dtype=torch.long)
        for spec in layout.instances
    ]
    caption_ids = torch.as_tensor(encode_tokens(layout.caption), dtype=torch.long)
    logits: dict[int, tuple] = {}

    def hook(site: AttnSite) -> torch.Tensor:
        renders = tuple(render_instance(site, ids) for ids in phrase_ids)
        r_c = site.attend(caption_ids.unsqueeze(0))
        if site.resolution not in logits:
            logits[site.resolution] = build_logit_masks(masks, site.resolution, config)
        instance_logits, caption_logits = logits[site.resolution]
        return merge(
            RenderSet(
                instance_renders=renders,
                caption_render=r_c,
                instance_logits=instance_logits,
                caption_logits=caption_logits,
            )
        )

    return hook
