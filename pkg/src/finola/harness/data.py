"""Synthetic image sets, PPM image I/O and PSNR."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics import make_rng


@dataclass(frozen=True)
class SynthSpec:
    count: int = 8
    size: int = 32
    seed: int = 0
    # relative frequency of gradient / blob / rectangle images
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)


def _gradient(rng, s):
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return c0 + t[..., None] * (c1 - c0)


def _blobs(rng, s):
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    img = np.broadcast_to(rng.uniform(0, 1, 3), (s, s, 3)).copy()
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.1, 0.3)
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - w) + w * rng.uniform(0, 1, 3)
    return img


def _rects(rng, s):
    img = np.broadcast_to(rng.uniform(0, 1, 3), (s, s, 3)).copy()
    for _ in range(rng.integers(1, 4)):
        x0, y0 = rng.integers(0, s - 4, 2)
        w, h = rng.integers(4, s // 2 + 1, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
    return img


_GENERATORS = (_gradient, _blobs, _rects)


def synth_dataset(spec: SynthSpec) -> np.ndarray:
    """(count, size, size, 3) float images in [0, 1]; image i depends only on (seed, i)."""
    p = np.asarray(spec.weights, dtype=np.float64)
    p = p / p.sum()
    out = np.empty((spec.count, spec.size, spec.size, 3))
    for i in range(spec.count):
        rng = make_rng(spec.seed, 7, i)
        kind = rng.choice(len(_GENERATORS), p=p)
        out[i] = _GENERATORS[kind](rng, spec.size)
    return np.clip(out, 0.0, 1.0)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when they are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def mean_psnr(recon, images) -> float:
    """Average per-image PSNR after clipping reconstructions to [0, 1]."""
    recon = np.clip(recon, 0.0, 1.0)
    return float(np.mean([psnr(r, i) for r, i in zip(recon, images)]))


# -- PPM (P6, maxval 255) ------------------------------------------------------------


def quantize(img) -> np.ndarray:
    """Float [0, 1] -> uint8 by round(255 * clip(x))."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img) -> None:
    q = quantize(img)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def tile(images, cols: int | None = None) -> np.ndarray:
    """Lay a list of equally sized images out in a grid (for contact sheets)."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    cols = cols or n
    rows = -(-n // cols)
    sheet = np.ones((rows * h, cols * w, c))
    for i, img in enumerate(images):
        r, k = divmod(i, cols)
        sheet[r * h:(r + 1) * h, k * w:(k + 1) * w] = img
    return sheet
