"""Diffusion machinery: schedule, forward process, attention, losses, sampler.

Two models share this code: a 1-channel depth denoiser and a 3-channel RGB
denoiser. Both predict the noise added by the forward process; the depth
model's training target is pyramid noise, so its loss drives it toward
committing to coherent low-frequency structure.

Value convention: images/depths live in [0, 1] on disk and in metrics, and
in [-1, 1] inside the diffusion process (z0 = 2v - 1). The sampler clips to
[-1, 1] and maps back to [0, 1] at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .noise import gaussian_noise, pyramid_noise

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 2e-2


# --- schedule and forward process ----------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached alpha-bar cumulative products.

    alpha_bar has T+1 entries: alpha_bar[0] = 1 by convention (the no-noise
    limit), alpha_bar[t] = prod_{i<=t} (1 - beta_i) for t in [1, T].
    """

    T: int
    beta: np.ndarray  # (T,) float64, beta[i] is beta_{i+1}
    alpha_bar: np.ndarray  # (T+1,) float64


def make_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def diffuse_with_alpha_bar(z0: torch.Tensor, alpha_bar_t, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(ab) z0 + sqrt(1-ab) eps, with ab given directly.

    alpha_bar_t may be a scalar or a per-sample 1-D tensor broadcast over
    the trailing field dimensions.
    """
    ab = torch.as_tensor(alpha_bar_t, dtype=z0.dtype, device=z0.device)
    while ab.dim() < z0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def forward_diffuse(
    z0: torch.Tensor, t: int | Sequence[int], eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Forward process at integer timestep(s) t in [1, T]."""
    t_arr = np.atleast_1d(np.asarray(t))
    if t_arr.min() < 1 or t_arr.max() > schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    ab = schedule.alpha_bar[t_arr]
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return diffuse_with_alpha_bar(z0, float(ab[0]), eps)
    return diffuse_with_alpha_bar(z0, torch.as_tensor(ab), eps)


# --- attention ------------------------------------------------------------


@dataclass
class AttentionInputs:
    """Q/K/V for one attention call; leading batch dims are allowed.

    q: (..., N_q, d), k: (..., N_k, d), v: (..., N_k, d_v).
    scale defaults to 1/sqrt(d). key_mask (..., N_k), where False hides a
    key (used to drop padding tokens), must leave at least one key visible
    per row.
    """

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    scale: float | None = None
    key_mask: torch.Tensor | None = None


_MASKED_LOGIT = -1e9


def cross_attention(inputs: AttentionInputs) -> torch.Tensor:
    """Softmax(Q Kᵀ / sqrt(d)) V with max-subtraction stabilization."""
    q, k, v = inputs.q, inputs.k, inputs.v
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    scale = inputs.scale if inputs.scale is not None else 1.0 / math.sqrt(q.shape[-1])
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    if inputs.key_mask is not None:
        logits = logits.masked_fill(~inputs.key_mask.unsqueeze(-2), _MASKED_LOGIT)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v)


# --- losses ---------------------------------------------------------------


def draw_training_noise(
    shape: tuple[int, int, int, int],
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    kind: str = "pyramid",
    dtype=torch.float32,
):
    """Per-sample timesteps and noise fields for one training batch."""
    b, c, h, w = shape
    t = rng.integers(1, schedule.T + 1, size=b)
    draw = pyramid_noise if kind == "pyramid" else gaussian_noise
    eps = np.stack([draw((c, h, w), rng).values for _ in range(b)])
    return t, torch.as_tensor(eps, dtype=dtype)


def loss_text_to_depth(
    model: Callable,
    batch: tuple[torch.Tensor, torch.Tensor],
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    *,
    noise_kind: str = "pyramid",
    draws: tuple | None = None,
) -> torch.Tensor:
    """MSE between the drawn noise field and the model's prediction.

    batch is (z0, caption_ids) with z0 of shape (B, C, H, W) in [-1, 1].
    model(z_t, t, caption_ids) must return a tensor shaped like z0. Noise
    and timesteps come from rng, or from a pre-drawn `draws = (t, eps)`
    pair when the caller needs them fixed (tests, gradient checks).
    """
    z0, caption_ids = batch
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    if draws is None:
        if rng is None:
            raise ValueError("need rng when draws are not supplied")
        t, eps = draw_training_noise(tuple(z0.shape), rng, schedule, noise_kind, z0.dtype)
    else:
        t, eps = draws
    eps = eps.to(z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = model(z_t, t, caption_ids)
    if pred.shape != z0.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != input {tuple(z0.shape)}")
    return torch.mean((eps - pred) ** 2)


def loss_layout(
    base_model,
    adapted_model: Callable,
    batch: tuple[torch.Tensor, torch.Tensor, list],
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    *,
    noise_kind: str = "pyramid",
    draws: tuple | None = None,
) -> torch.Tensor:
    """Adapter objective: same MSE, layout-conditioned model, frozen base.

    adapted_model(z_t, t, caption_ids, layouts) routes through the base
    denoiser with the instance adapter installed. The base must already be
    frozen (requires_grad False everywhere) so gradient reaches only the
    adapter; an unfrozen base is a contract violation, not a silent choice.
    """
    if any(p.requires_grad for p in base_model.parameters()):
        raise ValueError("base model must be frozen before the layout loss is used")
    z0, caption_ids, layouts = batch
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    if len(layouts) != z0.shape[0]:
        raise ValueError("one layout per sample required")
    if draws is None:
        if rng is None:
            raise ValueError("need rng when draws are not supplied")
        t, eps = draw_training_noise(tuple(z0.shape), rng, schedule, noise_kind, z0.dtype)
    else:
        t, eps = draws
    eps = eps.to(z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = adapted_model(z_t, t, caption_ids, layouts)
    return torch.mean((eps - pred) ** 2)


# --- sampler --------------------------------------------------------------


def plain_sampler(model: Callable) -> Callable:
    """Adapt a bare denoiser(z_t, t, ids) to the sampler's 4-arg protocol.

    The cond flag exists so pipelines can attach conditioning to one
    guidance branch only; a plain model ignores it.
    """

    def call(z_t, t, caption_ids, cond: bool):
        return model(z_t, t, caption_ids)

    return call


def ddim_sample(
    model: Callable,
    schedule: NoiseSchedule,
    steps: int,
    shape: tuple[int, int, int],
    rng: np.random.Generator,
    *,
    caption_ids: torch.Tensor,
    null_ids: torch.Tensor | None = None,
    guidance_scale: float = 1.0,
    init_noise: str = "gaussian",
    dtype=torch.float32,
) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) with classifier-free guidance.

    model(z_t, t, caption_ids, cond: bool) predicts noise; the cond flag
    lets the caller attach layout/renderer conditioning to the conditional
    branch only. Returns a (C, H, W) tensor in [0, 1].

    steps must divide T so the time grid T, T-T/S, ..., T/S is exact.
    """
    if steps < 1 or steps > schedule.T:
        raise ValueError(f"steps must be in [1, {schedule.T}], got {steps}")
    if schedule.T % steps:
        raise ValueError(f"steps={steps} must divide T={schedule.T}")
    if guidance_scale != 1.0 and null_ids is None:
        raise ValueError("guidance needs null caption ids")

    draw = pyramid_noise if init_noise == "pyramid" else gaussian_noise
    x = torch.as_tensor(draw(shape, rng).values, dtype=dtype).unsqueeze(0)

    stride = schedule.T // steps
    grid = list(range(schedule.T, 0, -stride))  # T, T-stride, ..., stride
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else 0
        eps = model(x, np.array([t]), caption_ids.unsqueeze(0), True)
        if guidance_scale != 1.0:
            eps_u = model(x, np.array([t]), null_ids.unsqueeze(0), False)
            eps = eps_u + guidance_scale * (eps - eps_u)
        ab_t = float(schedule.alpha_bar[t])
        ab_prev = float(schedule.alpha_bar[t_prev])
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps

    x0 = x.squeeze(0).clamp(-1.0, 1.0)
    return (x0 + 1.0) / 2.0
