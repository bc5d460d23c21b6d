"""Reference oracles shared by the test modules. Written to be obviously correct, not fast."""
from __future__ import annotations

import numpy as np

from anatclip.tensor import Tape, Tensor


def as64(*arrays):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x (x is perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-12))


def check_grads(build, inputs: list[Tensor], h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences for a scalar ``build(*inputs)``."""
    with Tape() as tape:
        loss = build(*inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float(build(*inputs).data), t.data, h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def weighted_sum(t: Tensor, seed: int = 0) -> Tensor:
    """Project a tensor to a scalar with fixed random weights so every output entry matters."""
    from anatclip import tensor as T
    w = np.random.default_rng(seed).normal(size=t.shape)
    return T.sum_(T.mul(t, Tensor(w)))


def naive_clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Per-pixel loops over the documented CLAHE convention: 256 bins, clip at clip_limit times the
    mean bin count with uniform redistribution, exclusive CDF anchored at the lowest occupied bin,
    within-bin residual kept, bilinear blend between tile centres."""
    h, w = img.shape
    ey = [round(i * h / tiles) for i in range(tiles + 1)]
    ex = [round(i * w / tiles) for i in range(tiles + 1)]
    bins = np.minimum((img * 256).astype(int), 255)
    maps = {}
    for ty in range(tiles):
        for tx in range(tiles):
            hist = [0.0] * 256
            n = 0
            for y in range(ey[ty], ey[ty + 1]):
                for x in range(ex[tx], ex[tx + 1]):
                    hist[bins[y, x]] += 1
                    n += 1
            limit = clip_limit * n / 256
            excess = 0.0
            for b in range(256):
                if hist[b] > limit:
                    excess += hist[b] - limit
                    hist[b] = limit
            hist = [v + excess / 256 for v in hist]
            # lowest bin occupied before clipping
            occupied = [b for b in range(256) if np.any(bins[ey[ty]:ey[ty + 1], ex[tx]:ex[tx + 1]] == b)]
            b0 = occupied[0]
            excl = [0.0] * 256
            run = 0.0
            for b in range(256):
                excl[b] = run
                run += hist[b]
            e0 = b0 / 256
            span = run - excl[b0]
            m = [0.0] * 256
            for b in range(256):
                if b < b0:
                    m[b] = b / 256
                else:
                    m[b] = e0 + (1 - e0) * (excl[b] - excl[b0]) / span
            maps[ty, tx] = m
    cy = [(ey[i] + ey[i + 1] - 1) / 2 for i in range(tiles)]
    cx = [(ex[i] + ex[i + 1] - 1) / 2 for i in range(tiles)]

    def locate(c, centres):
        if c <= centres[0]:
            return 0, 0, 0.0
        if c >= centres[-1]:
            return len(centres) - 1, len(centres) - 1, 0.0
        for i in range(len(centres) - 1):
            if centres[i] <= c <= centres[i + 1]:
                return i, i + 1, (c - centres[i]) / (centres[i + 1] - centres[i])

    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        y0, y1, fy = locate(y, cy)
        for x in range(w):
            x0, x1, fx = locate(x, cx)
            b = bins[y, x]
            resid = img[y, x] - b / 256
            vals = [[maps[yy, xx][b] + resid for xx in (x0, x1)] for yy in (y0, y1)]
            top = (1 - fx) * vals[0][0] + fx * vals[0][1]
            bot = (1 - fx) * vals[1][0] + fx * vals[1][1]
            out[y, x] = min(max((1 - fy) * top + fy * bot, 0.0), 1.0)
    return out


def pair_count_auc(scores, truth) -> float:
    """All positive/negative pairs: 1 when the positive scores higher, 1/2 on ties."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
