"""Closed word list shared by captions and instance phrases.

Id 0 is reserved for padding; real words get ids 1..V-1 in table order.
The ids are baked into trained checkpoints, so the order below is frozen.
"""

PAD_ID = 0

SHAPE_WORDS = ("circle", "square", "triangle", "ring")
COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "gray")
FILLER_WORDS = ("a", "scene", "on", "background", "large", "small")

WORDS = SHAPE_WORDS + COLOR_WORDS + FILLER_WORDS

WORD_TO_ID = {w: i + 1 for i, w in enumerate(WORDS)}
ID_TO_WORD = {i: w for w, i in WORD_TO_ID.items()}

VOCAB_SIZE = len(WORDS) + 1  # words + pad
MAX_TOKENS = 8

# Paint values used by the ground-truth renderer. Gray is painted at 0.75,
# not 0.5, so a gray instance never matches the mid-gray background exactly
# (depth and RGB must agree on which pixels are foreground).
CANONICAL_PAINT = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.75, 0.75, 0.75),
}

# Instances whose phrase names no color are painted white.
DEFAULT_PAINT = CANONICAL_PAINT["white"]
