from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

RGB = Tuple[int, int, int]

# 8-bit values so pixels survive the uint8 dataset encoding exactly.
OBJECT_COLORS: Dict[str, RGB] = {
    "red": (220, 40, 40),
    "gray": (128, 128, 128),
    "green": (40, 160, 60),
    "white": (245, 245, 245),
    "blue": (40, 80, 220),
    "brown": (130, 80, 40),
}

THEME_BACKGROUNDS: Dict[str, RGB] = {
    "residential": (214, 196, 160),
    "industrial": (96, 96, 112),
    "rural": (184, 208, 136),
    "airport": (176, 176, 160),
    "harbor": (64, 128, 160),
}

# 4x4 binary glyph per object class, drawn once per counted instance.
_GLYPHS = {
    "building": ["1111", "1001", "1001", "1111"],
    "road": ["0000", "1111", "1111", "0000"],
    "tree": ["0110", "1111", "0110", "0110"],
    "plane": ["0100", "1111", "0100", "1110"],
    "tank": ["0110", "1111", "1111", "0110"],
    "boat": ["0000", "1001", "1111", "0110"],
    "field": ["1010", "0101", "1010", "0101"],
}

CLASS_GLYPHS: Dict[str, np.ndarray] = {
    name: np.array([[c == "1" for c in row] for row in rows], dtype=bool) for name, rows in _GLYPHS.items()
}


def object_rgb(color: str) -> np.ndarray:
    return np.asarray(OBJECT_COLORS[color], dtype=np.float64) / 255.0


def theme_background(theme: str) -> np.ndarray:
    return np.asarray(THEME_BACKGROUNDS[theme], dtype=np.float64) / 255.0
