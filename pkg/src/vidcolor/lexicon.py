"""Color lexicon shared by the dataset generator and the text side."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

# RGB anchors; red/blue/purple/brown sit near the same BT.601 luminance (~0.33)
# so luminance alone cannot identify them.
COLOR_ANCHORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "orange": (0.95, 0.50, 0.05),
    "purple": (0.55, 0.15, 0.75),
    "pink": (0.95, 0.45, 0.70),
    "brown": (0.50, 0.30, 0.10),
    "gray": (0.50, 0.50, 0.50),
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "cyan": (0.10, 0.80, 0.85),
}

ACHROMATIC = frozenset({"gray", "black", "white"})

SHAPE_KINDS = ("circle", "square", "triangle")


def load_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    """Read color words, one per line. ``None`` loads the bundled list."""
    if path is None:
        text = resources.files("vidcolor").joinpath("data/colors.txt").read_text()
    else:
        text = Path(path).read_text()
    words = []
    for line in text.splitlines():
        word = line.strip().lower()
        if word and not word.startswith("#") and word not in words:
            words.append(word)
    return tuple(words)


COLOR_WORDS = load_lexicon()
