"""Synthetic scene corpus: layouts, ground-truth depth and RGB, shard I/O.

Scenes are flat-shaded primitives on a constant background. Depth encodes
occlusion order as constant value bands (near = bright); RGB paints each
instance in its phrase's color. Everything is a deterministic function of
(seed, config), including the on-disk shards.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .layout import BBox, InstanceSpec, Layout, parse_layout, serialize_layout
from .shapes import primitive_mask
from .vocab import CANONICAL_PAINT, COLOR_WORDS, DEFAULT_PAINT, MAX_TOKENS, SHAPE_WORDS

IMAGE_SIZE = 64

# Depth value bands. Rank k (0 = nearest) paints the constant band
# 0.9 - 0.12k; the background is a constant 0.1 plane. Rank 7 would land at
# 0.06, inside the background's separation margin, so ranks stop at 6.
DEPTH_NEAREST = 0.9
DEPTH_STEP = 0.12
DEPTH_BACKGROUND = 0.1
MAX_DEPTH_RANK = 6

RGB_BACKGROUND = 0.5

SHARD_FORMAT_VERSION = 1


class PlacementError(RuntimeError):
    """Box placement failed after the configured retry budget."""


class ShardCorruptionError(RuntimeError):
    """A shard file is missing, truncated, or fails its checksum."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the scene sampler.

    Box sides are fractions of the image, snapped to the pixel grid so box
    geometry (areas, IoU) is exact in float arithmetic. overlap_fraction is
    the maximum pairwise bbox IoU a new box may have with the ones already
    placed; 0 means pairwise-disjoint boxes.
    """

    min_instances: int = 1
    max_instances: int = 3
    overlap_fraction: float = 0.0
    image_size: int = IMAGE_SIZE
    min_side: float = 0.25
    max_side: float = 0.5
    color_prob: float = 0.9
    size_word_prob: float = 0.3
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_instances <= self.max_instances <= 7:
            raise ValueError("need 1 <= min_instances <= max_instances <= 7")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must be in [0, 1]")


@dataclass(eq=False)
class SceneSample:
    """One corpus entry: layout plus its rendered ground truth."""

    layout: Layout
    depth: np.ndarray  # (H, W) float64 in [0, 1]
    rgb: np.ndarray  # (3, H, W) float64 in [0, 1]
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, SceneSample)
            and self.layout == other.layout
            and self.seed == other.seed
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.rgb, other.rgb)
        )


def depth_band(rank: int) -> float:
    if rank > MAX_DEPTH_RANK:
        raise ValueError(
            f"depth_rank {rank} unsupported: band {DEPTH_NEAREST - DEPTH_STEP * rank:.2f} "
            f"would collide with the background plane"
        )
    return DEPTH_NEAREST - DEPTH_STEP * rank


def _paint_order(layout: Layout):
    # Back to front; equal ranks keep document order, so later instances win.
    return sorted(layout.instances, key=lambda s: -s.depth_rank)


def render_gt_depth(layout: Layout, hw: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Painter's-algorithm depth map: constant band per instance on a 0.1 plane."""
    depth = np.full(hw, DEPTH_BACKGROUND, dtype=np.float64)
    for spec in _paint_order(layout):
        depth[primitive_mask(spec.shape, spec.bbox, hw)] = depth_band(spec.depth_rank)
    return depth


def render_gt_rgb(layout: Layout, hw: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Same geometry as the depth render, painted in canonical phrase colors."""
    rgb = np.full((3, *hw), RGB_BACKGROUND, dtype=np.float64)
    for spec in _paint_order(layout):
        depth_band(spec.depth_rank)  # same rank bound as the depth render
        mask = primitive_mask(spec.shape, spec.bbox, hw)
        paint = CANONICAL_PAINT.get(spec.color, DEFAULT_PAINT)
        for c in range(3):
            rgb[c][mask] = paint[c]
    return rgb


def _snap8(values: np.ndarray) -> np.ndarray:
    """Quantize to the 8-bit PNG grid so shard round-trips are bit-exact."""
    return np.round(values * 255.0) / 255.0


def sample_scene(seed: int, config: GeneratorConfig = GeneratorConfig()) -> SceneSample:
    """Deterministic scene draw: boxes, phrases, ranks, renders."""
    rng = np.random.default_rng(seed)
    size = config.image_size
    n = int(rng.integers(config.min_instances, config.max_instances + 1))

    lo = max(2, round(config.min_side * size))
    hi = max(lo, round(config.max_side * size))
    boxes: list[BBox] = []
    retries = 0
    while len(boxes) < n:
        wpx = int(rng.integers(lo, hi + 1))
        hpx = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, size - wpx + 1))
        y0 = int(rng.integers(0, size - hpx + 1))
        box = BBox(x0 / size, y0 / size, (x0 + wpx) / size, (y0 + hpx) / size)
        if all(box.iou(b) <= config.overlap_fraction for b in boxes):
            boxes.append(box)
        else:
            retries += 1
            if retries > config.max_retries:
                raise PlacementError(
                    f"could not place {n} boxes with overlap <= "
                    f"{config.overlap_fraction} after {retries} retries (seed {seed})"
                )

    ranks = rng.permutation(n)
    instances = []
    for i, box in enumerate(boxes):
        words = []
        if rng.random() < config.size_word_prob:
            words.append("large" if box.area >= 0.125 else "small")
        if rng.random() < config.color_prob:
            words.append(str(rng.choice(COLOR_WORDS)))
        words.append(str(rng.choice(SHAPE_WORDS)))
        instances.append(InstanceSpec(bbox=box, phrase=tuple(words), depth_rank=int(ranks[i])))

    caption_words = ["a"]
    for spec in instances:
        caption_words.extend(spec.phrase)
    caption_words.append("scene")
    layout = Layout(instances=tuple(instances), caption=tuple(caption_words[:MAX_TOKENS]))

    hw = (size, size)
    return SceneSample(
        layout=layout,
        depth=_snap8(render_gt_depth(layout, hw)),
        rgb=_snap8(render_gt_rgb(layout, hw)),
        seed=int(seed),
    )


def corpus_seeds(master_seed: int, count: int) -> list[int]:
    """Per-scene seeds derived from one master seed."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count, np.uint64)]


def sample_corpus(
    master_seed: int, count: int, config: GeneratorConfig = GeneratorConfig()
) -> list[SceneSample]:
    """Draw `count` scenes, walking the derived seed stream past rare placement failures."""
    samples: list[SceneSample] = []
    block = 0
    while len(samples) < count:
        for seed in corpus_seeds(master_seed + block, count):
            try:
                samples.append(sample_scene(seed, config))
            except PlacementError:
                continue
            if len(samples) == count:
                break
        block += 1
    return samples


# --- shard I/O ------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_shard(samples: list[SceneSample], path: str | Path, config: GeneratorConfig | None = None):
    """Write one shard directory: PNG pair + layout JSON per sample, meta.json index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for s in samples:
        depth8 = np.round(s.depth * 255.0).astype(np.uint8)
        rgb8 = np.round(s.rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)
        triplet = (f"depth_{s.seed}.png", f"rgb_{s.seed}.png", f"layout_{s.seed}.json")
        Image.fromarray(depth8, mode="L").save(path / triplet[0])
        Image.fromarray(rgb8, mode="RGB").save(path / triplet[1])
        (path / triplet[2]).write_text(serialize_layout(s.layout, indent=2))
        names.extend(triplet)
    meta = {
        "format_version": SHARD_FORMAT_VERSION,
        "seeds": [s.seed for s in samples],
        "config": asdict(config) if config is not None else None,
        "checksums": {name: _sha256(path / name) for name in names},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_shard(path: str | Path) -> list[SceneSample]:
    """Load a shard, verifying every checksum. Raises ShardCorruptionError."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise ShardCorruptionError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != SHARD_FORMAT_VERSION:
        raise ShardCorruptionError(f"unsupported shard format {meta.get('format_version')!r}")
    for name, want in meta["checksums"].items():
        f = path / name
        if not f.is_file():
            raise ShardCorruptionError(f"missing file {name}")
        got = _sha256(f)
        if got != want:
            raise ShardCorruptionError(f"checksum mismatch for {name}: {got} != {want}")

    samples = []
    for seed in meta["seeds"]:
        with Image.open(path / f"depth_{seed}.png") as im:
            depth8 = np.asarray(im, dtype=np.float64)
        with Image.open(path / f"rgb_{seed}.png") as im:
            rgb8 = np.asarray(im, dtype=np.float64)
        layout = parse_layout((path / f"layout_{seed}.json").read_text())
        samples.append(
            SceneSample(
                layout=layout,
                depth=depth8 / 255.0,
                rgb=rgb8.transpose(2, 0, 1) / 255.0,
                seed=int(seed),
            )
        )
    return samples
