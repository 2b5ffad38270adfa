"""Training loops: text-to-depth base, layout adapter, RGB + control branch.

All three loops share the same skeleton — AdamW, per-step batches drawn with
replacement from an in-memory corpus, 10% caption dropout to the all-pad
null caption — and differ in what carries the gradient:

  depth    the 1-channel denoiser, trained to predict pyramid noise.
  adapter  only the layout adapter; the base depth model must be frozen
           first and is verified bit-identical afterward. Conditioning is
           color-stripped (phrases and caption), so the adapter learns
           placement and shape, never appearance.
  rgb      the 3-channel denoiser and its control branch jointly, standard
           Gaussian noise, ground-truth depth maps as the control input.

Determinism: one numpy generator seeded from the config drives batch
selection, dropout, and noise; torch's global seed only shapes the initial
weights.
"""

from __future__ import annotations

from functools import partial

import numpy as np
import torch

from .adapter import LayoutAdapter, adapted_forward
from .config import ArchKnobs, TrainConfig
from .control import ControlBranch, build_control_branch
from .diffusion import NoiseSchedule, loss_layout, loss_text_to_depth, make_schedule
from .layout import encode_tokens, strip_layout
from .synth import SceneSample
from .unet import UNetDenoiser, build_model, freeze
from .vocab import MAX_TOKENS


def state_fingerprint(module: torch.nn.Module) -> dict[str, bytes]:
    """Exact bytes of every parameter; equality means bit-identical weights."""
    return {
        name: p.detach().cpu().numpy().tobytes()
        for name, p in module.state_dict().items()
    }


def _caption_ids(layouts) -> torch.Tensor:
    return torch.as_tensor(
        np.stack([encode_tokens(lay.caption) for lay in layouts]), dtype=torch.long
    )


def _drop_captions(ids: torch.Tensor, rng: np.random.Generator, p: float) -> torch.Tensor:
    if p <= 0:
        return ids
    drop = torch.as_tensor(rng.random(ids.shape[0]) < p)
    return torch.where(drop.unsqueeze(1), torch.zeros_like(ids), ids)


def _check_finite(module: torch.nn.Module, step: int):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in {name} after step {step}")


def train_depth(
    corpus: list[SceneSample],
    knobs: ArchKnobs,
    cfg: TrainConfig,
    schedule: NoiseSchedule | None = None,
    *,
    log=None,
) -> tuple[UNetDenoiser, list[float]]:
    """Fit the text-to-depth model; returns (model, per-step losses)."""
    schedule = schedule or make_schedule()
    model = build_model(knobs.arch(in_channels=1), seed=cfg.seed)
    z0_all = torch.as_tensor(
        np.stack([s.depth for s in corpus])[:, None] * 2.0 - 1.0, dtype=torch.float32
    )
    ids_all = _caption_ids([s.layout for s in corpus])
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(corpus), cfg.batch_size)
        ids = _drop_captions(ids_all[idx], rng, cfg.caption_dropout)
        loss = loss_text_to_depth(model, (z0_all[idx], ids), schedule, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"depth loss diverged at step {step}")
        if log and (step % cfg.log_every == 0 or step == cfg.steps):
            _check_finite(model, step)
            log(f"depth step {step}/{cfg.steps} loss {np.mean(losses[-cfg.log_every:]):.4f}")
    _check_finite(model, cfg.steps)
    return model, losses


def train_adapter(
    base: UNetDenoiser,
    corpus: list[SceneSample],
    cfg: TrainConfig,
    schedule: NoiseSchedule | None = None,
    *,
    log=None,
) -> tuple[LayoutAdapter, list[float]]:
    """Fit the layout adapter over a frozen base; returns (adapter, losses)."""
    schedule = schedule or make_schedule()
    freeze(base)
    torch.manual_seed(cfg.seed)
    adapter = LayoutAdapter(base.cfg)
    layouts = [strip_layout(s.layout) for s in corpus]
    z0_all = torch.as_tensor(
        np.stack([s.depth for s in corpus])[:, None] * 2.0 - 1.0, dtype=torch.float32
    )
    ids_all = _caption_ids(layouts)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(adapter.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model_fn = partial(adapted_forward, base, adapter)
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(corpus), cfg.batch_size)
        ids = _drop_captions(ids_all[idx], rng, cfg.caption_dropout)
        batch_layouts = [layouts[i] for i in idx]
        loss = loss_layout(base, model_fn, (z0_all[idx], ids, batch_layouts), schedule, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"adapter loss diverged at step {step}")
        if log and (step % cfg.log_every == 0 or step == cfg.steps):
            _check_finite(adapter, step)
            log(f"adapter step {step}/{cfg.steps} loss {np.mean(losses[-cfg.log_every:]):.4f}")
    _check_finite(adapter, cfg.steps)
    return adapter, losses


def train_rgb(
    corpus: list[SceneSample],
    knobs: ArchKnobs,
    cfg: TrainConfig,
    schedule: NoiseSchedule | None = None,
    *,
    log=None,
) -> tuple[UNetDenoiser, ControlBranch, list[float]]:
    """Jointly fit the RGB denoiser and control branch on (image, depth) pairs."""
    schedule = schedule or make_schedule()
    model = build_model(knobs.arch(in_channels=3), seed=cfg.seed)
    branch = build_control_branch(knobs.arch(in_channels=3), seed=cfg.seed + 1)
    z0_all = torch.as_tensor(
        np.stack([s.rgb for s in corpus]) * 2.0 - 1.0, dtype=torch.float32
    )
    depth_all = torch.as_tensor(
        np.stack([s.depth for s in corpus])[:, None], dtype=torch.float32
    )
    ids_all = _caption_ids([s.layout for s in corpus])
    rng = np.random.default_rng(cfg.seed)
    params = list(model.parameters()) + list(branch.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(corpus), cfg.batch_size)
        ids = _drop_captions(ids_all[idx], rng, cfg.caption_dropout)
        control = branch(depth_all[idx])

        def conditioned(z_t, t, caption_ids):
            return model(z_t, t, caption_ids, control=control)

        loss = loss_text_to_depth(
            conditioned, (z0_all[idx], ids), schedule, rng, noise_kind="gaussian"
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if not np.isfinite(losses[-1]):
            raise FloatingPointError(f"rgb loss diverged at step {step}")
        if log and (step % cfg.log_every == 0 or step == cfg.steps):
            _check_finite(model, step)
            _check_finite(branch, step)
            log(f"rgb step {step}/{cfg.steps} loss {np.mean(losses[-cfg.log_every:]):.4f}")
    _check_finite(model, cfg.steps)
    _check_finite(branch, cfg.steps)
    return model, branch, losses
