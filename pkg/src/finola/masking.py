"""Quadrant-block masking and block-offset prediction.

One unmasked block of size (H/2, W/2) floats at row/column offset (r, c).
Every cell of the grid is assigned a unique source cell inside that block plus
a block offset (u, v) in {-1, 0, 1}^2, so the masked region is predicted by
stepping whole blocks away from the unmasked one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CoeffSet, FeatureGrid, StepUnit, multi_step

OFFSETS = [(u, v) for v in (-1, 0, 1) for u in (-1, 0, 1)]


@dataclass(frozen=True)
class MaskSpec:
    height: int
    width: int
    r: int  # block top row
    c: int  # block left column

    def __post_init__(self):
        if self.height % 2 or self.width % 2 or self.height < 2 or self.width < 2:
            raise ValueError(f"grid must have even, positive dims, got {self.height}x{self.width}")
        if not (0 <= self.r <= self.height // 2 and 0 <= self.c <= self.width // 2):
            raise ValueError(f"block offset ({self.r}, {self.c}) leaves the grid")

    @property
    def block_height(self) -> int:
        return self.height // 2

    @property
    def block_width(self) -> int:
        return self.width // 2

    def block_slices(self) -> tuple[slice, slice]:
        return slice(self.r, self.r + self.block_height), slice(self.c, self.c + self.block_width)

    def block_center(self) -> tuple[int, int]:
        """Grid cell (x, y) at the middle of the unmasked block."""
        return self.c + self.block_width // 2, self.r + self.block_height // 2


@dataclass(frozen=True)
class SourceMap:
    """Per-cell block offsets ``u``, ``v`` and source coordinates inside the block.

    ``src_x``/``src_y`` are block-local (0 <= src_x < W/2, 0 <= src_y < H/2).
    """

    spec: MaskSpec
    u: np.ndarray  # (H, W) int
    v: np.ndarray
    src_x: np.ndarray
    src_y: np.ndarray

    @property
    def masked(self) -> np.ndarray:
        return (self.u != 0) | (self.v != 0)

    def offset_index(self) -> np.ndarray:
        """Index into :data:`OFFSETS` for every cell."""
        return (self.v + 1) * 3 + (self.u + 1)


def sample_mask(height: int, width: int, rng: np.random.Generator) -> MaskSpec:
    if height % 2 or width % 2:
        raise ValueError(f"grid dims must be even, got {height}x{width}")
    r = int(rng.integers(0, height // 2 + 1))
    c = int(rng.integers(0, width // 2 + 1))
    return MaskSpec(height, width, r, c)


def _axis_offsets(n: int, start: int, size: int):
    t = np.arange(n)
    k = np.floor_divide(t - start, size)  # -1, 0 or 1 for start <= size
    return k, t - k * size - start


def build_source_map(spec: MaskSpec) -> SourceMap:
    u1, sx = _axis_offsets(spec.width, spec.c, spec.block_width)
    v1, sy = _axis_offsets(spec.height, spec.r, spec.block_height)
    u, v = np.meshgrid(u1, v1)
    src_x, src_y = np.meshgrid(sx, sy)
    return SourceMap(spec, u, v, src_x, src_y)


def block_coeffs(coeffs: CoeffSet) -> CoeffSet:
    return CoeffSet(coeffs.A, coeffs.B, coeffs.A_minus, coeffs.B_minus, coeffs.eps, StepUnit.BLOCK)


def blockwise_predict(unmasked, spec: MaskSpec, coeffs: CoeffSet) -> FeatureGrid:
    """Fill the full grid from the unmasked block's features by block-offset steps."""
    if coeffs.step_unit is not StepUnit.BLOCK:
        raise ValueError("block-wise prediction needs block-unit coefficients")
    unmasked = np.asarray(unmasked, dtype=np.float64)
    if unmasked.shape != (spec.block_height, spec.block_width, coeffs.channels):
        raise ValueError(f"block features must be {(spec.block_height, spec.block_width, coeffs.channels)}, got {unmasked.shape}")
    sm = build_source_map(spec)
    preds = {off: multi_step(unmasked, coeffs, *off) for off in OFFSETS}
    out = np.empty((spec.height, spec.width, coeffs.channels))
    for y in range(spec.height):
        for x in range(spec.width):
            off = (int(sm.u[y, x]), int(sm.v[y, x]))
            out[y, x] = preds[off][sm.src_y[y, x], sm.src_x[y, x]]
    return FeatureGrid(out, spec.block_center())


def masked_pixel_mask(spec: MaskSpec, patch: int) -> np.ndarray:
    """Boolean (H*patch, W*patch) image mask, True outside the unmasked block."""
    if patch < 1:
        raise ValueError("patch must be >= 1")
    cells = np.ones((spec.height, spec.width), dtype=bool)
    rows, cols = spec.block_slices()
    cells[rows, cols] = False
    return np.repeat(np.repeat(cells, patch, axis=0), patch, axis=1)


__all__ = [
    "OFFSETS",
    "MaskSpec",
    "SourceMap",
    "sample_mask",
    "build_source_map",
    "block_coeffs",
    "blockwise_predict",
    "masked_pixel_mask",
]
