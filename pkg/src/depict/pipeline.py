"""Two-stage generation, the metric harness, benchmarks, and ablation arms.

Stage 1 turns a layout into a scene depth map: the frozen text-to-depth
model plus its layout adapter, sampled with classifier-free guidance. The
conditioning is color-stripped — depth knows shapes and placement, never
appearance. Stage 2 renders RGB: the depth map feeds the control branch
(optionally low-pass filtered), per-instance masks segmented from it drive
the detail-renderer hook, and the full caption conditions the sampler.

Evaluation is oracle-based. For each instance we build a color-similarity
field from the generated image (bright where the pixel is close to the
instance's canonical paint), box-segment it, and score IoU against the
rasterized target primitive plus a color check on the segmented region.
Ablation arms vary only the generation knobs; the measurement protocol is
identical across arms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .adapter import LayoutAdapter, adapted_forward
from .checkpoint import load_checkpoint, load_into_module, save_checkpoint
from .config import RunConfig, to_dict
from .control import ControlBranch, FilterSpec, filter_control
from .diffusion import NoiseSchedule, ddim_sample, make_schedule
from .layout import BBox, InstanceSpec, Layout, encode_tokens, strip_layout
from .metrics import IOU_THRESHOLD, classify_color, iasr, iou, isr
from .render import MergeConfig, make_renderer_hook
from .segment import make_segmenter, segment_instance
from .shapes import primitive_mask
from .synth import IMAGE_SIZE
from .unet import ArchConfig, UNetDenoiser, build_model, freeze
from .vocab import CANONICAL_PAINT, DEFAULT_PAINT, MAX_TOKENS

EVAL_COLOR_WORD_DEFAULT = "white"  # colorless phrases are painted white


@dataclass
class PipelineBundle:
    """Everything a generation call needs, loaded once."""

    schedule: NoiseSchedule
    depth_model: UNetDenoiser
    adapter: LayoutAdapter
    rgb_model: UNetDenoiser
    control_branch: ControlBranch


# --- model persistence ------------------------------------------------------

CKPT_DEPTH = "depth.ckpt"
CKPT_ADAPTER = "adapter.ckpt"
CKPT_RGB = "rgb.ckpt"


def _schedule_dict(s: NoiseSchedule) -> dict:
    return {"T": s.T, "beta_min": float(s.beta[0]), "beta_max": float(s.beta[-1])}


def save_bundle(bundle: PipelineBundle, models_dir, meta: dict | None = None) -> None:
    models_dir = Path(models_dir)
    sched = _schedule_dict(bundle.schedule)
    arch_d = bundle.depth_model.cfg.table()
    arch_r = bundle.rgb_model.cfg.table()
    save_checkpoint(
        models_dir / CKPT_DEPTH, "depth", bundle.depth_model.state_dict(),
        arch=arch_d, schedule=sched, meta=meta,
    )
    save_checkpoint(
        models_dir / CKPT_ADAPTER, "adapter", bundle.adapter.state_dict(),
        arch=arch_d, schedule=sched, meta=meta,
    )
    rgb_state = {f"unet.{k}": v for k, v in bundle.rgb_model.state_dict().items()}
    rgb_state.update(
        {f"control.{k}": v for k, v in bundle.control_branch.state_dict().items()}
    )
    save_checkpoint(
        models_dir / CKPT_RGB, "rgb", rgb_state,
        arch=arch_r, schedule=sched, meta=meta,
    )


def load_bundle(models_dir) -> PipelineBundle:
    """Rebuild models from the three checkpoints; architecture comes from disk."""
    models_dir = Path(models_dir)
    d_state, d_header = load_checkpoint(models_dir / CKPT_DEPTH, expected_kind="depth")
    arch_d = _arch_from_table(d_header["arch"])
    depth_model = build_model(arch_d, seed=0)
    load_into_module(depth_model, d_state)

    a_state, _ = load_checkpoint(
        models_dir / CKPT_ADAPTER, expected_kind="adapter", expected_arch=d_header["arch"]
    )
    adapter = LayoutAdapter(arch_d)
    load_into_module(adapter, a_state)

    r_state, r_header = load_checkpoint(models_dir / CKPT_RGB, expected_kind="rgb")
    arch_r = _arch_from_table(r_header["arch"])
    rgb_model = build_model(arch_r, seed=0)
    branch = ControlBranch(arch_r)
    load_into_module(rgb_model, {k[5:]: v for k, v in r_state.items() if k.startswith("unet.")})
    load_into_module(branch, {k[8:]: v for k, v in r_state.items() if k.startswith("control.")})

    sd = d_header["schedule"]
    schedule = make_schedule(sd["T"], sd["beta_min"], sd["beta_max"])
    for m in (depth_model, adapter, rgb_model, branch):
        freeze(m)
    return PipelineBundle(
        schedule=schedule, depth_model=depth_model, adapter=adapter,
        rgb_model=rgb_model, control_branch=branch,
    )


def _arch_from_table(table: dict) -> ArchConfig:
    return ArchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in table.items()})


# --- generation -------------------------------------------------------------


def generate_depth(
    layout: Layout,
    depth_model: UNetDenoiser,
    adapter: LayoutAdapter,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    seed: int,
) -> np.ndarray:
    """Layout -> scene depth map (H, W) in [0, 1]; deterministic per seed."""
    stripped = strip_layout(layout)
    caption_ids = torch.as_tensor(encode_tokens(stripped.caption), dtype=torch.long)
    null_ids = torch.zeros(MAX_TOKENS, dtype=torch.long)

    def guided(z_t, t, ids, cond: bool):
        if cond:
            return adapted_forward(
                depth_model, adapter, z_t, t, ids, [stripped] * z_t.shape[0]
            )
        return depth_model(z_t, t, ids)

    with torch.no_grad():
        out = ddim_sample(
            guided, schedule, cfg.sampler.steps, (1, IMAGE_SIZE, IMAGE_SIZE),
            np.random.default_rng(seed), caption_ids=caption_ids, null_ids=null_ids,
            guidance_scale=cfg.sampler.guidance, init_noise="pyramid",
        )
    return out.squeeze(0).numpy().astype(np.float64)


def generate_image(
    layout: Layout,
    depth: np.ndarray,
    rgb_model: UNetDenoiser,
    control_branch: ControlBranch,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    seed: int,
) -> np.ndarray:
    """Layout + depth map -> RGB image (3, H, W) in [0, 1]."""
    if depth.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"depth must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {depth.shape}")
    segmenter = make_segmenter(cfg.render.segmenter)
    masks = [segmenter(depth, spec.bbox) for spec in layout.instances]
    hook = make_renderer_hook(
        layout, masks, MergeConfig(alpha=cfg.render.alpha, beta=cfg.render.beta)
    )
    depth_t = torch.as_tensor(depth, dtype=torch.float32).reshape(1, 1, *depth.shape)
    with torch.no_grad():
        control = control_branch(depth_t)
        if cfg.control.filter_enabled:
            control = filter_control(control, FilterSpec(rho=cfg.control.filter_rho))

    caption_ids = torch.as_tensor(encode_tokens(layout.caption), dtype=torch.long)
    null_ids = torch.zeros(MAX_TOKENS, dtype=torch.long)

    def guided(z_t, t, ids, cond: bool):
        # Control steers both guidance branches; the renderer only the
        # conditional one (the null branch must stay layout-blind).
        return rgb_model(z_t, t, ids, control=control, hook=hook if cond else None)

    with torch.no_grad():
        out = ddim_sample(
            guided, schedule, cfg.sampler.steps, (3, IMAGE_SIZE, IMAGE_SIZE),
            np.random.default_rng(seed), caption_ids=caption_ids, null_ids=null_ids,
            guidance_scale=cfg.sampler.guidance, init_noise="gaussian",
        )
    return out.numpy().astype(np.float64)


def run_pipeline(
    layout: Layout, bundle: PipelineBundle, cfg: RunConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Full layout -> (depth, image); stage seeds derived from one seed."""
    seeds = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    depth = generate_depth(
        layout, bundle.depth_model, bundle.adapter, bundle.schedule, cfg, int(seeds[0])
    )
    image = generate_image(
        layout, depth, bundle.rgb_model, bundle.control_branch, bundle.schedule,
        cfg, int(seeds[1]),
    )
    return depth, image


# --- evaluation -------------------------------------------------------------


def color_field(image: np.ndarray, color_word: str) -> np.ndarray:
    """Similarity to a canonical paint color, in [0, 1], bright = close."""
    paint = np.asarray(CANONICAL_PAINT.get(color_word, DEFAULT_PAINT))
    dist = np.linalg.norm(image - paint[:, None, None], axis=0)
    return 1.0 - dist / np.sqrt(3.0)


def target_mask(spec: InstanceSpec, hw=(IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    return primitive_mask(spec.shape, spec.bbox, hw)


def instance_record(image: np.ndarray, spec: InstanceSpec) -> dict:
    """Position + attribute verdict for one instance of one generated image."""
    expected = spec.color or EVAL_COLOR_WORD_DEFAULT
    mask = segment_instance(color_field(image, expected), spec.bbox)
    iou_val = iou(mask.values, target_mask(spec))
    seen = classify_color(image, mask.values)
    return {
        "expected_color": expected,
        "observed_color": seen,
        "iou": iou_val,
        "success": bool(iou_val >= IOU_THRESHOLD and seen == expected),
    }


def evaluate_images(layouts: list[Layout], images: list[np.ndarray]) -> dict:
    """Per-instance records plus MIoU / IASR / ISR aggregates."""
    if len(layouts) != len(images):
        raise ValueError("layout/image count mismatch")
    records = []
    for lay, img in zip(layouts, images):
        records.append([instance_record(img, spec) for spec in lay.instances])
    return {
        "records": records,
        "miou": float(np.mean([r["iou"] for image in records for r in image])),
        "iasr": iasr([[r["success"] for r in image] for image in records]),
        "isr": isr([[r["success"] for r in image] for image in records]),
    }


def evaluate_depth_stage(layouts: list[Layout], depths: list[np.ndarray]) -> dict:
    """Stage-1 layout adherence: segment the depth map, IoU vs target primitive."""
    records = []
    for lay, depth in zip(layouts, depths):
        row = []
        for spec in lay.instances:
            mask = segment_instance(depth, spec.bbox)
            row.append({"iou": iou(mask.values, target_mask(spec))})
        records.append(row)
    return {
        "records": records,
        "miou": float(np.mean([r["iou"] for image in records for r in image])),
    }


def make_report(aggregates: dict, cfg: RunConfig, corpus_checksum: str) -> dict:
    return {
        "records": aggregates["records"],
        "miou": aggregates["miou"],
        "iasr": aggregates.get("iasr"),
        "isr": aggregates.get("isr"),
        "config": to_dict(cfg),
        "corpus_checksum": corpus_checksum,
    }


def check_report(report: dict) -> None:
    """Aggregates must be recomputable from the records; raise if not."""
    missing = [k for k in ("records", "miou") if k not in report]
    if missing:
        raise ValueError(f"not an evaluation report: missing {', '.join(missing)}")
    records = report["records"]
    miou_re = float(np.mean([r["iou"] for image in records for r in image]))
    if abs(miou_re - report["miou"]) > 1e-9:
        raise ValueError(f"report miou {report['miou']} != recomputed {miou_re}")
    if report.get("iasr") is not None:
        verdicts = [[r["success"] for r in image] for image in records]
        if abs(iasr(verdicts) - report["iasr"]) > 1e-9:
            raise ValueError("report iasr does not match its records")
        if abs(isr(verdicts) - report["isr"]) > 1e-9:
            raise ValueError("report isr does not match its records")


# --- benchmarks -------------------------------------------------------------

HELD_OUT_SEED_OFFSET = 7_000_003  # keeps eval layouts off the training stream


def held_out_layouts(count: int, master_seed: int, max_instances: int = 3) -> list[Layout]:
    """Fresh layouts from a seed stream disjoint from the training corpus."""
    from .synth import GeneratorConfig, sample_corpus

    cfg = GeneratorConfig(min_instances=1, max_instances=max_instances)
    samples = sample_corpus(master_seed + HELD_OUT_SEED_OFFSET, count, cfg)
    return [s.layout for s in samples]


_BENCH_COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
_BENCH_SHAPES = ("circle", "square", "triangle", "ring")


def overlap_benchmark(count: int = 64, master_seed: int = 0) -> list[Layout]:
    """Overlap-heavy two-instance layouts with distinct colors.

    Every layout has a guaranteed box overlap (second box offset by half a
    side from the first), pixel-snapped coordinates, and two different
    colors — the attribute-leakage stress the detail renderer exists for.
    """
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0xB_EAC]))
    layouts = []
    for _ in range(count):
        side = int(rng.integers(18, 28))  # pixels
        x0 = int(rng.integers(2, IMAGE_SIZE - side - side // 2 - 2))
        y0 = int(rng.integers(2, IMAGE_SIZE - side - side // 2 - 2))
        dx = side // 2 if rng.random() < 0.5 else side // 3
        dy = side // 2 if rng.random() < 0.5 else side // 3
        s = IMAGE_SIZE
        b1 = BBox(x0 / s, y0 / s, (x0 + side) / s, (y0 + side) / s)
        b2 = BBox((x0 + dx) / s, (y0 + dy) / s, (x0 + dx + side) / s, (y0 + dy + side) / s)
        c1, c2 = rng.choice(len(_BENCH_COLORS), size=2, replace=False)
        shapes = rng.choice(len(_BENCH_SHAPES), size=2)
        ranks = rng.permutation(2)
        instances = tuple(
            InstanceSpec(
                bbox=b,
                phrase=(_BENCH_COLORS[int(c)], _BENCH_SHAPES[int(sh)]),
                depth_rank=int(rk),
            )
            for b, c, sh, rk in zip((b1, b2), (c1, c2), shapes, ranks)
        )
        caption = ("a",) + instances[0].phrase + instances[1].phrase + ("scene",)
        layouts.append(Layout(instances=instances, caption=caption[:MAX_TOKENS]))
    return layouts


# --- ablation ---------------------------------------------------------------

ABLATION_ARMS = (
    ("filter_on_otsu", True, "otsu"),
    ("filter_on_bbox", True, "bbox"),
    ("filter_off_otsu", False, "otsu"),
    ("filter_off_bbox", False, "bbox"),
)


def ablate(
    layouts: list[Layout], bundle: PipelineBundle, cfg: RunConfig, *, log=None
) -> dict[str, dict]:
    """Run the four filter x segmenter arms over one benchmark.

    Stage-1 depth maps are shared across arms (neither knob affects them);
    only RGB generation differs. Evaluation uses the same oracle protocol
    for every arm.
    """
    from dataclasses import replace

    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(layouts), np.uint64)
    depths = [
        generate_depth(
            lay, bundle.depth_model, bundle.adapter, bundle.schedule, cfg, int(s)
        )
        for lay, s in zip(layouts, seeds)
    ]
    if log:
        log(f"stage-1 depth maps done ({len(depths)})")
    reports = {}
    for name, filter_on, segmenter in ABLATION_ARMS:
        arm_cfg = replace(
            cfg,
            control=replace(cfg.control, filter_enabled=filter_on),
            render=replace(cfg.render, segmenter=segmenter),
        )
        images = [
            generate_image(
                lay, depth, bundle.rgb_model, bundle.control_branch,
                bundle.schedule, arm_cfg, int(s) + 1,
            )
            for lay, depth, s in zip(layouts, depths, seeds)
        ]
        agg = evaluate_images(layouts, images)
        reports[name] = make_report(agg, arm_cfg, corpus_checksum="")
        if log:
            log(f"{name}: miou {agg['miou']:.3f} iasr {agg['iasr']:.3f} isr {agg['isr']:.3f}")
    return reports


# --- artifact I/O -----------------------------------------------------------


def write_png(array: np.ndarray, path) -> None:
    """8-bit PNG; (H, W) grayscale or (3, H, W) RGB in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    elif data.ndim == 3 and data.shape[0] == 3:
        Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"cannot write array of shape {array.shape} as PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)
    return arr


def write_json(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_checksums(out_dir) -> Path:
    """checksums.json over every file in the directory (sorted, recursive)."""
    out = Path(out_dir)
    sums = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "checksums.json":
            sums[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
    path = out / "checksums.json"
    path.write_text(json.dumps(sums, indent=2, sort_keys=True) + "\n")
    return path
