"""Organ glyphs: connected polyomino patterns on a 4x4 cell grid.

Patterns were picked by a seeded greedy search so that any two glyphs share
less than 45% of their cells (intersection over union). Each cell renders as an
8x8 pixel block, the encoder's patch size, giving 32x32 pixel glyphs that scenes
place on the patch grid.

Every cell also carries the organ's stamp, an 8x8 binary texture that is
unchanged by 90 degree rotations and transposes. Each organ has its own stamp,
so a single patch is often enough to name the organ.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

CELL = 8
GRID = 4
GLYPH_SIZE = CELL * GRID

PATTERNS = {
    "brain":       ".##.#####...#...",
    "mandible":    "##.#.###..#...#.",
    "neck":        "###...#.####....",
    "shoulder":    "..#.###...##....",
    "humerus":     ".###.#.#...#...#",
    "elbow":       "#...#...##...##.",
    "forearm":     "......##..##.###",
    "wrist":       ".....#..####.#.#",
    "hand":        "...#...#.###.#..",
    "lungs":       ".##..##..#...#..",
    "heart":       "....##...##...##",
    "liver":       "#####...#.......",
    "kidneys":     ".#...#...#..####",
    "intestine":   "..##..#...#.###.",
    "pelvic bone": "....#.#.###.#...",
    "thigh":       "........#.#####.",
    "knee":        ".#####...##.....",
    "leg":         "..#...##.##...#.",
    "ankle":       "....####.#.#.#..",
    "foot":        "##...#..##..#...",
}


def _symmetric_stamp(code: int) -> np.ndarray:
    """8x8 stamp from 10 bits, one per cell of the quadrant triangle i <= j; mirrored into all eight symmetries."""
    q = np.zeros((CELL // 2, CELL // 2), dtype=bool)
    for k, (i, j) in enumerate((i, j) for i in range(CELL // 2) for j in range(i, CELL // 2)):
        q[i, j] = q[j, i] = bool(code >> k & 1)
    half = np.hstack([q, q[:, ::-1]])
    return np.vstack([half, half[::-1]])


def _pick_stamps(n: int) -> list[np.ndarray]:
    # greedy farthest-point selection over half-filled stamps; fully deterministic
    pool = [s for s in map(_symmetric_stamp, range(1, 1 << 10)) if 0.3 <= s.mean() <= 0.7]
    chosen = [pool[0]]
    while len(chosen) < n:
        chosen.append(max(pool, key=lambda s: min(int((s != c).sum()) for c in chosen)))
    return chosen


STAMPS = dict(zip(PATTERNS, _pick_stamps(len(PATTERNS))))
for _s in STAMPS.values():
    _s.setflags(write=False)
# intensity of the unstamped part of a cell, relative to the stamped part
STAMP_FLOOR = 0.3


def pattern_cells(organ: str) -> np.ndarray:
    bits = PATTERNS[organ]
    return np.array([c == "#" for c in bits], dtype=bool).reshape(GRID, GRID)


@lru_cache(maxsize=None)
def glyph_mask(organ: str) -> np.ndarray:
    mask = np.kron(pattern_cells(organ), np.ones((CELL, CELL), dtype=bool))
    mask.setflags(write=False)
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@lru_cache(maxsize=None)
def glyph_fill(organ: str) -> np.ndarray:
    """Relative intensity over the glyph box: 1 on stamp pixels, STAMP_FLOOR elsewhere in the mask, 0 outside."""
    stamp = np.where(STAMPS[organ], 1.0, STAMP_FLOOR)
    fill = np.kron(pattern_cells(organ), stamp)
    fill.setflags(write=False)
    return fill
