"""Finite-difference checks of the continuous-coordinate FINOLA equations.

Covers the recurrence residuals of a discrete grid, Euler integration on a fine
lattice, mixed-partial and anisotropic-Laplacian residuals, and Gaussian
curvature of per-channel feature surfaces.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import CoeffSet, Direction, FeatureGrid, integrate, normalize
from .numerics import solve_or_invert

__all__ = [
    "GridTooSmall",
    "FineField",
    "CurvatureReport",
    "recurrence_residual",
    "integrate_ode",
    "clairaut_residual",
    "laplacian_residual",
    "gaussian_curvature",
    "rank_channels",
    "curvature_histogram",
    "compatible_coeffs",
    "residual_table",
    "write_csv",
]


class GridTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class FineField:
    """Samples ``z(x0 + i*h, y0 + j*h)`` stored as (ny, nx, C).

    ``origin`` is the sample index (ix, iy) of the seed vector, or None for
    fields that were not integrated from a seed. Each quadrant around the
    seed is a separate Euler integration, so the seed's row and column are
    lines where the field is only piecewise smooth.
    """

    data: np.ndarray
    h: float
    origin: tuple[int, int] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3:
            raise ValueError(f"field must be (ny, nx[, C]), got {data.shape}")
        if not self.h > 0:
            raise ValueError("h must be positive")
        object.__setattr__(self, "data", data)


def recurrence_residual(grid: FeatureGrid | np.ndarray, coeffs: CoeffSet, direction: Direction) -> np.ndarray:
    """Per-cell L-inf norm of ``z(next) - z - M normalize(z)`` for one direction.

    The result has one entry per cell that has a neighbour in ``direction``:
    shape (H, W-1) for horizontal moves and (H-1, W) for vertical ones,
    indexed by the source cell's position in the stepping order (``[y, x]``
    for right/down, ``[y, x-1]`` for left, ``[y-1, x]`` for up).
    """
    z = grid.data if isinstance(grid, FeatureGrid) else np.asarray(grid, dtype=np.float64)
    direction = Direction(direction)
    m = coeffs.matrix(direction)
    if direction is Direction.RIGHT:
        src, dst = z[:, :-1], z[:, 1:]
    elif direction is Direction.LEFT:
        src, dst = z[:, 1:], z[:, :-1]
    elif direction is Direction.DOWN:
        src, dst = z[:-1], z[1:]
    else:
        src, dst = z[1:], z[:-1]
    if src.size == 0:
        raise GridTooSmall(f"grid needs at least 2 cells along {direction.value}")
    r = dst - src - normalize(src, coeffs.eps) @ m.T
    return np.abs(r).max(axis=-1)


def integrate_ode(q, coeffs: CoeffSet, h: float, extent: tuple[int, int], origin: tuple[int, int] | None = None) -> FineField:
    """Forward-Euler integration of dz/dx = A z_n, dz/dy = B z_n with step ``h``.

    ``extent`` = (W, H) is the size of the unit-cell grid being refined and
    ``origin`` its seed cell (defaults to the grid centre). Integer
    coordinates land on samples, so ``h=1`` reproduces the discrete generator.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    width, height = extent
    x0, y0 = (width // 2, height // 2) if origin is None else origin
    per_unit = 1.0 / h
    k = int(round(per_unit))
    if abs(per_unit - k) > 1e-9:
        raise ValueError("1/h must be an integer so unit cells fall on samples")
    nx = (width - 1) * k + 1
    ny = (height - 1) * k + 1
    o = (x0 * k, y0 * k)
    return FineField(integrate(q, coeffs, ny, nx, o, h), h, o)


def _interior_mask(f: FineField) -> np.ndarray:
    ny, nx, _ = f.data.shape
    if ny < 3 or nx < 3:
        raise GridTooSmall(f"need at least 3 samples per axis, got {nx}x{ny}")
    keep = np.ones((ny - 2, nx - 2), dtype=bool)
    if f.origin is not None:
        ox, oy = f.origin
        if 1 <= oy <= ny - 2:
            keep[oy - 1, :] = False
        if 1 <= ox <= nx - 2:
            keep[:, ox - 1] = False
    return keep


def _d2x(z, h):
    return (z[1:-1, 2:] - 2.0 * z[1:-1, 1:-1] + z[1:-1, :-2]) / (h * h)


def _d2y(z, h):
    return (z[2:, 1:-1] - 2.0 * z[1:-1, 1:-1] + z[:-2, 1:-1]) / (h * h)


def _dx(z, h):
    return (z[1:-1, 2:] - z[1:-1, :-2]) / (2.0 * h)


def _dy(z, h):
    return (z[2:, 1:-1] - z[:-2, 1:-1]) / (2.0 * h)


def _max_norm(r, keep):
    r = np.abs(r).max(axis=-1)[keep]
    return float(r.max()) if r.size else 0.0


def clairaut_residual(f: FineField, coeffs: CoeffSet | None = None) -> float:
    """Largest interior mismatch between the two mixed second derivatives.

    Without ``coeffs`` both orders are plain central-difference compositions.
    With ``coeffs`` each order goes through one of the PDEs, mirroring the
    Laplacian derivation: d/dx(dz/dy) = B d(z_n)/dx and d/dy(dz/dx) = A d(z_n)/dy.
    Stencil centres on the seed's row/column are excluded.
    """
    keep = _interior_mask(f)
    z, h = f.data, f.h
    if coeffs is None:
        zx = (z[:, 2:] - z[:, :-2]) / (2 * h)
        d_xy = (zx[2:] - zx[:-2]) / (2 * h)
        zy = (z[2:] - z[:-2]) / (2 * h)
        d_yx = (zy[:, 2:] - zy[:, :-2]) / (2 * h)
    else:
        zn = normalize(z, coeffs.eps)
        d_xy = _dx(zn, h) @ coeffs.B.T
        d_yx = _dy(zn, h) @ coeffs.A.T
    return _max_norm(d_xy - d_yx, keep)


def laplacian_residual(f: FineField, coeffs: CoeffSet, cond_limit: float = 1e8) -> float:
    """Largest interior norm of ``z_xx - (A B^-1)^2 z_yy`` by central differences.

    Raises SingularMatrix when B cannot be inverted under ``cond_limit``.
    Stencil centres on the seed's row/column are excluded.
    """
    b_inv, _ = solve_or_invert(coeffs.B, cond_limit)
    k = coeffs.A @ b_inv
    k2 = k @ k
    keep = _interior_mask(f)
    r = _d2x(f.data, f.h) - _d2y(f.data, f.h) @ k2.T
    return _max_norm(r, keep)


def compatible_coeffs(channels: int, rng: np.random.Generator, scale: float = 0.1, eps: float = 1e-6) -> CoeffSet:
    """Random coefficients whose two PDEs admit a joint solution.

    Uses ``B = c A`` with a random scalar ``c`` (the flows of A z_n and c A z_n
    commute) and ``A_minus = -A``, ``B_minus = -B`` so the backward steps
    discretize the same flow. ``A`` is rescaled to spectral norm ``scale``.
    """
    a = rng.normal(size=(channels, channels))
    a *= scale / np.linalg.norm(a, 2)
    c = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
    b = c * a
    return CoeffSet(a, b, -a, -b, eps=eps)


def residual_table(q, coeffs: CoeffSet, hs, extent=(5, 5), origin=None) -> list[dict]:
    rows = []
    for h in hs:
        f = integrate_ode(q, coeffs, h, extent, origin)
        rows.append({
            "h": float(h),
            "clairaut": clairaut_residual(f, coeffs),
            "laplacian": laplacian_residual(f, coeffs),
        })
    return rows


# -- curvature ---------------------------------------------------------------


@dataclass
class CurvatureReport:
    curvature: np.ndarray  # (C, H-2, W-2)
    peak_pos: np.ndarray  # (C,)
    peak_neg: np.ndarray  # (C,)
    score: np.ndarray  # (C,)
    ranking: np.ndarray  # (C,) channel indices, best first

    def top_scores(self, k: int) -> np.ndarray:
        return self.score[self.ranking[:k]]


def gaussian_curvature(surface, spacing: float = 1.0) -> np.ndarray:
    """Gaussian curvature of the height field ``z[y, x]`` at interior samples."""
    z = np.asarray(surface, dtype=np.float64)
    if z.ndim < 2 or z.shape[0] < 3 or z.shape[1] < 3:
        raise GridTooSmall(f"need at least a 3x3 surface, got {z.shape[:2]}")
    h = float(spacing)
    zx = (z[1:-1, 2:] - z[1:-1, :-2]) / (2 * h)
    zy = (z[2:, 1:-1] - z[:-2, 1:-1]) / (2 * h)
    zxx = (z[1:-1, 2:] - 2 * z[1:-1, 1:-1] + z[1:-1, :-2]) / (h * h)
    zyy = (z[2:, 1:-1] - 2 * z[1:-1, 1:-1] + z[:-2, 1:-1]) / (h * h)
    zxy = (z[2:, 2:] - z[2:, :-2] - z[:-2, 2:] + z[:-2, :-2]) / (4 * h * h)
    return (zxx * zyy - zxy * zxy) / (1.0 + zx * zx + zy * zy) ** 2


def rank_channels(grid: FeatureGrid | np.ndarray, spacing: float = 1.0) -> CurvatureReport:
    z = grid.data if isinstance(grid, FeatureGrid) else np.asarray(grid, dtype=np.float64)
    kappa = np.moveaxis(gaussian_curvature(z, spacing), -1, 0)
    flat = kappa.reshape(kappa.shape[0], -1)
    peak_pos = np.maximum(0.0, flat.max(axis=1))
    peak_neg = np.minimum(0.0, flat.min(axis=1))
    score = np.sqrt(0.5 * (peak_pos**2 + peak_neg**2))
    ranking = np.lexsort((np.arange(score.size), -score))
    return CurvatureReport(kappa, peak_pos, peak_neg, score, ranking)


DEFAULT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def curvature_histogram(reports, top_k: int, quantiles=DEFAULT_QUANTILES) -> list[dict]:
    """Quantiles of the k-th largest channel score across images, for k = 1..top_k.

    Quantiles are read off the empirical CDF (no interpolation), so they depend
    only on the score distribution: repeating the reports changes nothing.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    scores = np.stack([r.top_scores(top_k) for r in reports])  # (N, K)
    rows = []
    for k in range(scores.shape[1]):
        for qv in quantiles:
            rows.append({"channel_rank": k + 1, "quantile": float(qv), "score": float(np.quantile(scores[:, k], qv, method="inverted_cdf"))})
    return rows


def write_csv(rows: list[dict], path, fieldnames=None) -> None:
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
