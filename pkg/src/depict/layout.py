"""Layout documents: boxes, phrases, captions, and their JSON interchange form.

A layout is the sole interface between the user and the pipeline: an ordered
list of (bbox, phrase) instances plus a global caption. Instance order is
meaningful; it fixes the slot order of the per-instance merge downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any

from .vocab import COLOR_WORDS, MAX_TOKENS, PAD_ID, SHAPE_WORDS, WORD_TO_ID

MAX_INSTANCES = 8
MIN_BBOX_AREA = 1.0 / 4096.0

TokenSeq = tuple[int, ...]


class LayoutError(ValueError):
    """Base class for everything this module raises."""


class LayoutParseError(LayoutError):
    """Document is not well-formed (bad JSON, wrong structure, unknown keys)."""


class LayoutValidationError(LayoutError):
    """Document parses but violates a value invariant."""

    def __init__(self, message: str, *, instance: int | None = None, field: str | None = None):
        prefix = ""
        if instance is not None:
            prefix += f"instance {instance}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)
        self.instance = instance
        self.field = field


class VocabularyError(LayoutError):
    """A word outside the closed vocabulary."""

    def __init__(self, word: str):
        super().__init__(f"unknown word {word!r}")
        self.word = word


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates, corners (x0,y0)-(x1,y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise LayoutValidationError(f"{name} must be a number, got {v!r}", field="bbox")
            if not 0.0 <= v <= 1.0:
                raise LayoutValidationError(f"{name}={v} outside [0, 1]", field="bbox")
        if not self.x0 < self.x1:
            raise LayoutValidationError(f"x0={self.x0} must be < x1={self.x1}", field="bbox")
        if not self.y0 < self.y1:
            raise LayoutValidationError(f"y0={self.y0} must be < y1={self.y1}", field="bbox")
        if self.area < MIN_BBOX_AREA:
            raise LayoutValidationError(
                f"area {self.area:.2e} below minimum {MIN_BBOX_AREA:.2e}", field="bbox"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def iou(self, other: "BBox") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class InstanceSpec:
    """One instance: where it goes, what it is, and (for GT rendering) its depth order."""

    bbox: BBox
    phrase: tuple[str, ...]
    depth_rank: int = 0

    def __post_init__(self):
        _check_words(self.phrase, field="phrase")
        shapes = [w for w in self.phrase if w in SHAPE_WORDS]
        if len(shapes) != 1:
            raise LayoutValidationError(
                f"phrase must contain exactly one shape word, got {list(self.phrase)}",
                field="phrase",
            )
        colors = [w for w in self.phrase if w in COLOR_WORDS]
        if len(colors) > 1:
            raise LayoutValidationError(
                f"phrase may contain at most one color word, got {list(self.phrase)}",
                field="phrase",
            )
        if not isinstance(self.depth_rank, int) or isinstance(self.depth_rank, bool):
            raise LayoutValidationError(
                f"depth_rank must be an integer, got {self.depth_rank!r}", field="depth_rank"
            )
        if self.depth_rank < 0:
            raise LayoutValidationError(
                f"depth_rank must be >= 0, got {self.depth_rank}", field="depth_rank"
            )

    @property
    def shape(self) -> str:
        return next(w for w in self.phrase if w in SHAPE_WORDS)

    @property
    def color(self) -> str | None:
        """The phrase's color word, or None for colorless instances."""
        return next((w for w in self.phrase if w in COLOR_WORDS), None)


@dataclass(frozen=True)
class Layout:
    """An ordered set of instances plus a global caption."""

    instances: tuple[InstanceSpec, ...]
    caption: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.instances) < 1:
            raise LayoutValidationError("layout must contain at least one instance")
        if len(self.instances) > MAX_INSTANCES:
            raise LayoutValidationError(
                f"too many instances ({len(self.instances)} > {MAX_INSTANCES})"
            )
        _check_words(self.caption, field="caption")


def _check_words(words: tuple[str, ...], *, field: str):
    if not isinstance(words, tuple):
        raise LayoutValidationError(f"expected a tuple of words, got {type(words).__name__}",
                                    field=field)
    if len(words) > MAX_TOKENS:
        raise LayoutValidationError(
            f"at most {MAX_TOKENS} words allowed, got {len(words)}", field=field
        )
    for w in words:
        if w not in WORD_TO_ID:
            raise VocabularyError(w)


def encode_tokens(words: tuple[str, ...] | list[str]) -> TokenSeq:
    """Map words to ids, right-padded with the pad id to the fixed length 8."""
    if len(words) > MAX_TOKENS:
        raise LayoutValidationError(f"at most {MAX_TOKENS} words allowed, got {len(words)}")
    ids = []
    for w in words:
        if w not in WORD_TO_ID:
            raise VocabularyError(w)
        ids.append(WORD_TO_ID[w])
    ids.extend([PAD_ID] * (MAX_TOKENS - len(ids)))
    return tuple(ids)


def strip_attributes(spec: InstanceSpec) -> InstanceSpec:
    """Drop color words from the phrase; shape and size words survive."""
    kept = tuple(w for w in spec.phrase if w not in COLOR_WORDS)
    return replace(spec, phrase=kept)


def strip_layout(layout: Layout) -> Layout:
    """strip_attributes over every instance, plus the caption.

    Used to build the appearance-free conditioning for the depth stage, which
    should see structure (shapes, sizes, placement) but never color.
    """
    return Layout(
        instances=tuple(strip_attributes(s) for s in layout.instances),
        caption=tuple(w for w in layout.caption if w not in COLOR_WORDS),
    )


# --- JSON interchange ---------------------------------------------------

_TOP_KEYS = {"caption", "instances"}
_INSTANCE_KEYS = {"bbox", "phrase", "depth_rank"}


def parse_layout(document: str) -> Layout:
    """Parse and validate a layout document.

    Raises LayoutParseError for structural problems (bad JSON, unknown or
    missing keys, wrong container types) and LayoutValidationError /
    VocabularyError for value-level violations, tagged with the instance
    index where one applies.
    """
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as e:
        raise LayoutParseError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e

    if not isinstance(raw, dict):
        raise LayoutParseError(f"top level must be an object, got {type(raw).__name__}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise LayoutParseError(f"unknown keys {sorted(unknown)}")
    if "instances" not in raw:
        raise LayoutParseError("missing required key 'instances'")

    caption = _parse_words(raw.get("caption", []), field="caption")
    if not isinstance(raw["instances"], list):
        raise LayoutParseError("'instances' must be an array")

    instances = []
    for i, item in enumerate(raw["instances"]):
        try:
            instances.append(_parse_instance(item))
        except LayoutValidationError as e:
            raise LayoutValidationError(str(e), instance=i) from e
        except LayoutParseError as e:
            raise LayoutParseError(f"instance {i}: {e}") from e
    return Layout(instances=tuple(instances), caption=caption)


def _parse_instance(item: Any) -> InstanceSpec:
    if not isinstance(item, dict):
        raise LayoutParseError(f"instance must be an object, got {type(item).__name__}")
    unknown = set(item) - _INSTANCE_KEYS
    if unknown:
        raise LayoutParseError(f"unknown keys {sorted(unknown)}")
    for req in ("bbox", "phrase"):
        if req not in item:
            raise LayoutParseError(f"missing required key '{req}'")
    bbox_raw = item["bbox"]
    if (
        not isinstance(bbox_raw, list)
        or len(bbox_raw) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox_raw)
    ):
        raise LayoutParseError("'bbox' must be an array of 4 numbers [x0, y0, x1, y1]")
    bbox = BBox(*(float(v) for v in bbox_raw))
    phrase = _parse_words(item["phrase"], field="phrase")
    rank = item.get("depth_rank", 0)
    return InstanceSpec(bbox=bbox, phrase=phrase, depth_rank=rank)


def _parse_words(raw: Any, *, field: str) -> tuple[str, ...]:
    if not isinstance(raw, list) or not all(isinstance(w, str) for w in raw):
        raise LayoutParseError(f"'{field}' must be an array of words")
    return tuple(raw)


def serialize_layout(layout: Layout, *, indent: int | None = None) -> str:
    """Inverse of parse_layout: parse(serialize(x)) == x for every valid layout."""
    doc = {
        "caption": list(layout.caption),
        "instances": [
            {
                "bbox": [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1],
                "phrase": list(s.phrase),
                "depth_rank": s.depth_rank,
            }
            for s in layout.instances
        ],
    }
    return json.dumps(doc, indent=indent)
