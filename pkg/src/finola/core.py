"""First-order norm+linear autoregression over a 2-D latent grid.

A grid ``z`` has shape (H, W, C). Moving one cell right applies
``z + A @ normalize(z)``; down uses ``B``; left and up use the separately
learned ``A_minus`` / ``B_minus``. Off-axis cells average the
horizontal-then-vertical and vertical-then-horizontal chains from the seed.
"""
from __future__ import annotations

import enum
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_EPS = 1e-6


class Direction(enum.Enum):
    RIGHT = "right"
    DOWN = "down"
    LEFT = "left"
    UP = "up"


class StepUnit(enum.Enum):
    CELL = "cell"
    BLOCK = "block"


@dataclass(frozen=True)
class CoeffSet:
    A: np.ndarray
    B: np.ndarray
    A_minus: np.ndarray
    B_minus: np.ndarray
    eps: float = DEFAULT_EPS
    step_unit: StepUnit = StepUnit.CELL

    def __post_init__(self):
        mats = [np.asarray(m, dtype=np.float64) for m in (self.A, self.B, self.A_minus, self.B_minus)]
        c = mats[0].shape[0]
        for m in mats:
            if m.shape != (c, c):
                raise ValueError(f"coefficient matrices must all be {c}x{c}, got {m.shape}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        for name, m in zip(("A", "B", "A_minus", "B_minus"), mats):
            object.__setattr__(self, name, m)

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    def matrix(self, direction: Direction) -> np.ndarray:
        return {
            Direction.RIGHT: self.A,
            Direction.DOWN: self.B,
            Direction.LEFT: self.A_minus,
            Direction.UP: self.B_minus,
        }[direction]

    @classmethod
    def zeros(cls, channels: int, **kw) -> "CoeffSet":
        z = np.zeros((channels, channels))
        return cls(z, z, z, z, **kw)

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, std: float | None = None, **kw) -> "CoeffSet":
        std = 0.02 / np.sqrt(channels) if std is None else std
        mats = [rng.normal(0.0, std, size=(channels, channels)) for _ in range(4)]
        return cls(*mats, **kw)


@dataclass(frozen=True)
class FeatureGrid:
    data: np.ndarray  # (H, W, C)
    origin: tuple[int, int]  # (x0, y0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"grid data must be (H, W, C), got {data.shape}")
        x0, y0 = self.origin
        if not (0 <= x0 < data.shape[1] and 0 <= y0 < data.shape[0]):
            raise ValueError(f"origin {self.origin} outside a {data.shape[1]}x{data.shape[0]} grid")
        if not np.isfinite(data).all():
            raise ValueError("grid contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", (int(x0), int(y0)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class NormStats:
    """Frozen per-position normalization statistics.

    ``mu`` and ``sigma`` are (H, W), shared by both construction passes, or
    (2, H, W) with index 0 for the horizontal-first pass and 1 for the
    vertical-first pass. ``sigma`` is the population std; the stabilizer
    ``eps`` is still added at use.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape or mu.ndim not in (2, 3) or (mu.ndim == 3 and mu.shape[0] != 2):
            raise ValueError(f"bad stats shapes {mu.shape} / {sigma.shape}")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape[-2:]

    def for_pass(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if self.mu.ndim == 2:
            return self.mu, self.sigma
        return self.mu[k], self.sigma[k]


def default_origin(height: int, width: int) -> tuple[int, int]:
    return width // 2, height // 2


def normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Channel normalization ``(v - mean) / (std + eps)`` along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    d = v - mu
    sigma = np.sqrt(np.mean(d * d, axis=-1, keepdims=True))
    return d / (sigma + eps)


def _advance(z, m, eps, h=1.0, stats=None):
    if stats is None:
        zn = normalize(z, eps)
    else:
        mu, sigma = stats
        zn = (z - mu[..., None]) / (sigma[..., None] + eps)
    return z + h * (zn @ m.T)


def step(z, direction: Direction, coeffs: CoeffSet) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != coeffs.channels:
        raise ValueError(f"vector has {z.shape[-1]} channels, coefficients have {coeffs.channels}")
    return _advance(z, coeffs.matrix(Direction(direction)), coeffs.eps)


def _chain(z, coeffs, n, pos: Direction, neg: Direction):
    d = pos if n > 0 else neg
    for _ in range(abs(n)):
        z = step(z, d, coeffs)
    return z


def multi_step(z, coeffs: CoeffSet, u: int, v: int) -> np.ndarray:
    """Move ``u`` cells horizontally and ``v`` vertically from ``z``.

    Negative offsets use the left/up matrices. Mixed moves average the
    horizontal-first and vertical-first chains.
    """
    z = np.asarray(z, dtype=np.float64)
    if u == 0:
        return _chain(z, coeffs, v, Direction.DOWN, Direction.UP)
    if v == 0:
        return _chain(z, coeffs, u, Direction.RIGHT, Direction.LEFT)
    h_first = _chain(_chain(z, coeffs, u, Direction.RIGHT, Direction.LEFT), coeffs, v, Direction.DOWN, Direction.UP)
    v_first = _chain(_chain(z, coeffs, v, Direction.DOWN, Direction.UP), coeffs, u, Direction.RIGHT, Direction.LEFT)
    return 0.5 * (h_first + v_first)


def _check_cell(coeffs: CoeffSet):
    if coeffs.step_unit is not StepUnit.CELL:
        raise ValueError("grid generation needs cell-unit coefficients")


def _resolve_origin(height, width, origin):
    origin = default_origin(height, width) if origin is None else tuple(origin)
    x0, y0 = origin
    if not (0 <= x0 < width and 0 <= y0 < height):
        raise ValueError(f"origin {origin} outside a {width}x{height} grid")
    return int(x0), int(y0)


def generate_sequential(q, coeffs: CoeffSet, height: int, width: int, origin=None) -> FeatureGrid:
    """Reference generator: every cell runs its own operator chain from ``q``."""
    _check_cell(coeffs)
    x0, y0 = _resolve_origin(height, width, origin)
    q = np.asarray(q, dtype=np.float64)
    out = np.empty((height, width, q.shape[0]))
    for y in range(height):
        for x in range(width):
            out[y, x] = multi_step(q, coeffs, x - x0, y - y0)
    return FeatureGrid(out, (x0, y0))


def _fill_line(seed_line, m_pos, m_neg, length, start, eps, h=1.0, stats=None):
    """Extend ``seed_line`` (..., C) along a new axis of ``length`` cells.

    ``seed_line`` sits at index ``start``. Returns (length, ..., C).
    ``stats`` (mu, sigma), when given, are indexed (length, ...).
    """
    out = np.empty((length,) + seed_line.shape)
    out[start] = seed_line

    def st(i):
        return None if stats is None else (stats[0][i], stats[1][i])

    for i in range(start + 1, length):
        out[i] = _advance(out[i - 1], m_pos, eps, h, st(i - 1))
    for i in range(start - 1, -1, -1):
        out[i] = _advance(out[i + 1], m_neg, eps, h, st(i + 1))
    return out


# Lines are always advanced in chunks of this many, whatever the worker count,
# so every matmul sees the same operand shapes and results stay bit-identical.
_CHUNK = 16


def _chunks(n):
    return [slice(a, min(a + _CHUNK, n)) for a in range(0, n, _CHUNK)]


def _map_chunks(fn, n, workers):
    chunks = _chunks(n)
    if workers <= 1 or len(chunks) == 1:
        return chunks, [fn(sl) for sl in chunks]
    with ThreadPoolExecutor(workers) as pool:
        return chunks, list(pool.map(fn, chunks))


def _pass(q, coeffs, height, width, origin, horizontal_first, h=1.0, stats=None, workers=1):
    x0, y0 = origin
    eps = coeffs.eps
    out = np.empty((height, width, q.shape[0]))
    if horizontal_first:
        row_stats = None if stats is None else (stats[0][y0], stats[1][y0])
        row = _fill_line(q, coeffs.A, coeffs.A_minus, width, x0, eps, h, row_stats)  # (W, C)

        def cols(sl):
            s = None if stats is None else (stats[0][:, sl], stats[1][:, sl])
            return _fill_line(row[sl], coeffs.B, coeffs.B_minus, height, y0, eps, h, s)

        for sl, block in zip(*_map_chunks(cols, width, workers)):
            out[:, sl] = block
        return out
    col_stats = None if stats is None else (stats[0][:, x0], stats[1][:, x0])
    col = _fill_line(q, coeffs.B, coeffs.B_minus, height, y0, eps, h, col_stats)  # (H, C)

    def rows(sl):
        s = None if stats is None else (stats[0][sl].T, stats[1][sl].T)
        return np.swapaxes(_fill_line(col[sl], coeffs.A, coeffs.A_minus, width, x0, eps, h, s), 0, 1)

    for sl, block in zip(*_map_chunks(rows, height, workers)):
        out[sl] = block
    return out


def construction_passes(q, coeffs: CoeffSet, height: int, width: int, origin=None, stats: NormStats | None = None):
    """Return the horizontal-first and vertical-first fields as two FeatureGrids."""
    _check_cell(coeffs)
    origin = _resolve_origin(height, width, origin)
    q = np.asarray(q, dtype=np.float64)
    s = [None, None] if stats is None else [stats.for_pass(0), stats.for_pass(1)]
    return (
        FeatureGrid(_pass(q, coeffs, height, width, origin, True, stats=s[0]), origin),
        FeatureGrid(_pass(q, coeffs, height, width, origin, False, stats=s[1]), origin),
    )


def generate_parallel(q, coeffs: CoeffSet, height: int, width: int, origin=None, workers: int = 1) -> FeatureGrid:
    """Two-pass generator: each pass fills one axis, then all lines of the other at once.

    Columns (or rows) are independent, so ``workers > 1`` splits them across
    threads without changing the result.
    """
    _check_cell(coeffs)
    origin = _resolve_origin(height, width, origin)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (coeffs.channels,):
        raise ValueError(f"q must have shape ({coeffs.channels},), got {q.shape}")
    f1 = _pass(q, coeffs, height, width, origin, True, workers=workers)
    f2 = _pass(q, coeffs, height, width, origin, False, workers=workers)
    return FeatureGrid(0.5 * (f1 + f2), origin)


def generate_frozen(q, coeffs: CoeffSet, stats: NormStats, height: int, width: int, origin=None) -> FeatureGrid:
    """Like :func:`generate_parallel` but normalizing with frozen per-position stats."""
    if stats.shape != (height, width):
        raise ValueError(f"stats are {stats.shape}, grid is {(height, width)}")
    f1, f2 = construction_passes(q, coeffs, height, width, origin, stats=stats)
    return FeatureGrid(0.5 * (f1.data + f2.data), f1.origin)


def pass_stats(q, coeffs: CoeffSet, height: int, width: int, origin=None) -> NormStats:
    """Per-position mean/std of the vectors each construction pass actually normalizes."""
    f1, f2 = construction_passes(q, coeffs, height, width, origin)
    fields = np.stack([f1.data, f2.data])
    mu = fields.mean(axis=-1)
    sigma = fields.std(axis=-1)
    return NormStats(mu, sigma)


def integrate(q, coeffs: CoeffSet, n_y: int, n_x: int, origin: tuple[int, int], h: float) -> np.ndarray:
    """Two-path Euler integration with step ``h`` on an ``n_y`` x ``n_x`` sample lattice."""
    q = np.asarray(q, dtype=np.float64)
    f1 = _pass(q, coeffs, n_y, n_x, origin, True, h=h)
    f2 = _pass(q, coeffs, n_y, n_x, origin, False, h=h)
    return 0.5 * (f1 + f2)


_FGRD = struct.Struct("<4sHIIIII")


def save_grid(grid: FeatureGrid, path) -> None:
    h, w, c = grid.data.shape
    x0, y0 = grid.origin
    with open(path, "wb") as f:
        f.write(_FGRD.pack(b"FGRD", 1, h, w, c, x0, y0))
        f.write(np.ascontiguousarray(grid.data, dtype="<f8").tobytes())


def load_grid(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    magic, version, h, w, c, x0, y0 = _FGRD.unpack_from(raw)
    if magic != b"FGRD":
        raise ValueError(f"{path}: not a FGRD grid dump")
    if version != 1:
        raise ValueError(f"{path}: unsupported FGRD version {version}")
    data = np.frombuffer(raw, dtype="<f8", offset=_FGRD.size)
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload has {data.size} values, header says {h * w * c}")
    return FeatureGrid(data.reshape(h, w, c).astype(np.float64), (x0, y0))
