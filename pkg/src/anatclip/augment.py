"""Grayscale image augmentations and the 10-variant sampling policy.

Images are float arrays in [0, 1] with shape (height, width).
"""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np

N_BINS = 256
VARIANTS_PER_IMAGE = 10
OP_NAMES = ("clahe", "contrast", "gamma", "rotate", "translate")


class ParameterError(ValueError):
    pass


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ParameterError(f"expected a 2-D grayscale image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------- CLAHE

def tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def pixel_bins(img: np.ndarray) -> np.ndarray:
    return np.minimum((img * N_BINS).astype(np.int64), N_BINS - 1)


def tile_mapping(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Equalization map (value at each bin's lower edge) for one tile histogram.

    Bins below the lowest occupied bin map to themselves, and the lowest
    occupied bin maps to its own lower edge; the rest of [edge, 1] is spread
    by the clipped exclusive CDF.
    """
    hist = hist.astype(np.float64)
    n = hist.sum()
    edges = np.arange(N_BINS) / N_BINS
    occupied = np.flatnonzero(hist)
    if n == 0 or occupied.size == 0:
        return edges
    b0 = occupied[0]
    limit = clip_limit * n / N_BINS
    clipped = np.minimum(hist, limit)
    clipped += (n - clipped.sum()) / N_BINS
    cdf_excl = np.concatenate([[0.0], np.cumsum(clipped)[:-1]])
    span = n - cdf_excl[b0]
    out = edges.copy()
    if span > 0:
        e0 = edges[b0]
        out[b0:] = e0 + (1.0 - e0) * (cdf_excl[b0:] - cdf_excl[b0]) / span
    return out


def _axis_weights(n: int, edges: np.ndarray):
    """Per-pixel (lower tile, upper tile, weight) along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    t = len(centers)
    pos = np.arange(n, dtype=np.float64)
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, t - 1)
    hi = np.minimum(lo + 1, t - 1)
    gap = centers[hi] - centers[lo]
    w = np.where(gap > 0, (pos - centers[lo]) / np.where(gap > 0, gap, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape
    if tiles < 1 or tiles > min(h, w):
        raise ParameterError(f"{tiles}x{tiles} tiles do not fit a {h}x{w} image")
    if clip_limit < 1:
        raise ParameterError(f"clip_limit must be >= 1, got {clip_limit}")
    ye, xe = tile_edges(h, tiles), tile_edges(w, tiles)
    bins = pixel_bins(img)
    maps = np.empty((tiles, tiles, N_BINS))
    for i in range(tiles):
        for j in range(tiles):
            hist = np.bincount(bins[ye[i]:ye[i + 1], xe[j]:xe[j + 1]].ravel(), minlength=N_BINS)
            maps[i, j] = tile_mapping(hist, clip_limit)
    y0, y1, wy = _axis_weights(h, ye)
    x0, x1, wx = _axis_weights(w, xe)
    y0, y1, wy = y0[:, None], y1[:, None], wy[:, None]
    m00 = maps[y0, x0, bins]
    m01 = maps[y0, x1, bins]
    m10 = maps[y1, x0, bins]
    m11 = maps[y1, x1, bins]
    top = m00 + wx * (m01 - m00)
    bot = m10 + wx * (m11 - m10)
    mapped = top + wy * (bot - top)
    residual = img - bins / N_BINS
    return np.clip(mapped + residual, 0.0, 1.0)


# ---------------------------------------------------------------- point ops

def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    if not 0.5 <= factor <= 2.0:
        raise ParameterError(f"contrast factor {factor} outside [0.5, 2]")
    img = _check_image(img)
    if factor == 1.0:
        return img.copy()
    m = img.mean()
    return np.clip(m + factor * (img - m), 0.0, 1.0)


def gamma(img: np.ndarray, g: float) -> np.ndarray:
    if not 0.25 <= g <= 4.0:
        raise ParameterError(f"gamma {g} outside [0.25, 4]")
    img = _check_image(img)
    if g == 1.0:
        return img.copy()
    return np.power(img, g)


# ---------------------------------------------------------------- geometry

def rotate(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate about ((w-1)/2, (h-1)/2), bilinear, zero fill outside the frame."""
    if not -180.0 <= theta_deg <= 180.0:
        raise ParameterError(f"rotation {theta_deg} outside [-180, 180]")
    img = _check_image(img)
    h, w = img.shape
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map from output pixel to source position
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    return bilinear_sample(img, sy, sx)


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy, fx = sy - y0, sx - x0
    # shift by one for the zero border; clip far-away samples into it
    yi = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    xi = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    yj = np.clip(yi + 1, 0, h + 1)
    xj = np.clip(xi + 1, 0, w + 1)
    far = (sy < -1) | (sy > h) | (sx < -1) | (sx > w)
    a, b = padded[yi, xi], padded[yi, xj]
    cc, d = padded[yj, xi], padded[yj, xj]
    top = a + fx * (b - a)
    bot = cc + fx * (d - cc)
    out = top + fy * (bot - top)
    out[far] = 0.0
    return np.clip(out, 0.0, 1.0)


def translate(img: np.ndarray, dx: int, dy: int, max_shift: int | None = None) -> np.ndarray:
    """Integer shift; positive dx moves content right, positive dy moves it down."""
    img = _check_image(img)
    h, w = img.shape
    bound = default_max_shift(w) if max_shift is None else max_shift
    if abs(dx) > bound or abs(dy) > bound or int(dx) != dx or int(dy) != dy:
        raise ParameterError(f"shift ({dx}, {dy}) outside integer range +-{bound}")
    dx, dy = int(dx), int(dy)
    out = np.zeros_like(img)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = img[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def default_max_shift(width: int) -> int:
    return int(0.25 * width)


# ---------------------------------------------------------------- specs and policy

@dataclass(frozen=True)
class AugmentOp:
    name: str
    params: tuple

    def __str__(self) -> str:
        return f"{self.name}({','.join(_fmt(p) for p in self.params)})"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), "g")


@dataclass(frozen=True)
class AugmentSpec:
    ops: tuple[AugmentOp, ...]

    def __str__(self) -> str:
        return "|".join(str(op) for op in self.ops)

    @classmethod
    def parse(cls, text: str) -> "AugmentSpec":
        ops = []
        for part in filter(None, text.split("|")):
            m = re.fullmatch(r"(\w+)\(([^)]*)\)", part.strip())
            if not m or m.group(1) not in OP_NAMES:
                raise ParameterError(f"cannot parse augmentation op {part!r}")
            args = tuple(int(a) if re.fullmatch(r"-?\d+", a) else float(a)
                         for a in filter(None, m.group(2).split(",")))
            ops.append(AugmentOp(m.group(1), args))
        return cls(tuple(ops))

    def apply(self, img: np.ndarray, max_shift: int | None = None) -> np.ndarray:
        out = _check_image(img)
        for op in self.ops:
            if op.name == "translate":
                out = translate(out, *op.params, max_shift=max_shift)
            else:
                out = OPS[op.name](out, *op.params)
        return out


OPS = {"clahe": clahe, "contrast": contrast, "gamma": gamma, "rotate": rotate, "translate": translate}


@dataclass(frozen=True)
class AugmentPolicy:
    """Parameter ranges for sampled specs; each range is inclusive."""
    ops: tuple[str, ...] = OP_NAMES
    clahe_tiles: tuple[int, ...] = (4, 8)
    clip_limit: tuple[float, float] = (1.0, 4.0)
    contrast: tuple[float, float] = (0.5, 2.0)
    gamma: tuple[float, float] = (0.5, 2.0)
    rotate: tuple[float, float] = (-180.0, 180.0)
    translate: tuple[int, int] = (-16, 16)
    min_ops: int = 1
    max_ops: int = 3
    n_variants: int = VARIANTS_PER_IMAGE

    @classmethod
    def for_width(cls, width: int, **kw) -> "AugmentPolicy":
        s = default_max_shift(width)
        return cls(translate=(-s, s), **kw)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(ops=("contrast", "gamma", "rotate", "translate"), contrast=(1.0, 1.0),
                   gamma=(1.0, 1.0), rotate=(0.0, 0.0), translate=(0, 0))


def _sample_op(name: str, policy: AugmentPolicy, rng: np.random.Generator) -> AugmentOp:
    if name == "clahe":
        tiles = int(policy.clahe_tiles[int(rng.integers(len(policy.clahe_tiles)))])
        return AugmentOp("clahe", (tiles, round(float(rng.uniform(*policy.clip_limit)), 2)))
    if name == "translate":
        lo, hi = policy.translate
        return AugmentOp("translate", (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))))
    lo, hi = getattr(policy, name)
    digits = 1 if name == "rotate" else 3
    return AugmentOp(name, (round(float(rng.uniform(lo, hi)), digits),))


def sample_policy(rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy(),
                  max_tries: int = 1000) -> list[AugmentSpec]:
    """Draw ``policy.n_variants`` pairwise-distinct specs of 1-3 distinct ops each."""
    specs: list[AugmentSpec] = []
    seen = set()
    for _ in range(max_tries):
        if len(specs) == policy.n_variants:
            break
        k = int(rng.integers(policy.min_ops, min(policy.max_ops, len(policy.ops)) + 1))
        names = [policy.ops[i] for i in rng.choice(len(policy.ops), k, replace=False)]
        spec = AugmentSpec(tuple(_sample_op(n, policy, rng) for n in names))
        key = str(spec)
        if key not in seen:
            seen.add(key)
            specs.append(spec)
    if len(specs) < policy.n_variants:
        raise ParameterError("policy ranges too narrow for distinct specs")
    return specs


def apply_all(img: np.ndarray, specs: list[AugmentSpec], max_shift: int | None = None) -> list[np.ndarray]:
    return [spec.apply(img, max_shift=max_shift) for spec in specs]


def shift_perturbation(rng: np.random.Generator, width: int, rotate_deg: float = 45.0,
                       gamma_range: tuple[float, float] = (0.5, 2.0), shift_frac: float = 0.125) -> AugmentSpec:
    """Random rotation, gamma and translation used to build distribution-shifted test sets."""
    s = int(round(shift_frac * width))
    return AugmentSpec((
        AugmentOp("rotate", (round(float(rng.uniform(-rotate_deg, rotate_deg)), 1),)),
        AugmentOp("gamma", (round(float(rng.uniform(*gamma_range)), 3),)),
        AugmentOp("translate", (int(rng.integers(-s, s + 1)), int(rng.integers(-s, s + 1)))),
    ))


def perturb_images(images: np.ndarray, image_ids, seed: int) -> tuple[np.ndarray, list[AugmentSpec]]:
    """Apply one seeded shift perturbation per image; the stream is keyed by image id, not position."""
    out, specs = [], []
    for img, image_id in zip(images, image_ids):
        rng = np.random.default_rng([seed, zlib.crc32(str(image_id).encode("utf-8"))])
        spec = shift_perturbation(rng, img.shape[1])
        specs.append(spec)
        out.append(spec.apply(img))
    return np.stack(out).astype(np.float32) if out else np.asarray(images, np.float32), specs
