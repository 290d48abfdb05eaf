from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finola.core import CoeffSet, Direction, multi_step, step
from finola.masking import (
    OFFSETS,
    MaskSpec,
    block_coeffs,
    blockwise_predict,
    build_source_map,
    masked_pixel_mask,
    sample_mask,
)
from finola.numerics import make_rng


def all_specs(n):
    return [MaskSpec(n, n, r, c) for r, c in product(range(n // 2 + 1), repeat=2)]


def test_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(5, 4, 0, 0)
    with pytest.raises(ValueError):
        MaskSpec(8, 8, 5, 0)
    with pytest.raises(ValueError):
        sample_mask(6, 7, make_rng(0))


def test_sample_smallest_grid_reaches_all_positions():
    rng = make_rng(0)
    seen = {(s.r, s.c) for s in (sample_mask(2, 2, rng) for _ in range(200))}
    assert seen == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_sample_deterministic():
    a = [sample_mask(16, 16, make_rng(3, i)) for i in range(20)]
    b = [sample_mask(16, 16, make_rng(3, i)) for i in range(20)]
    assert a == b


def test_sample_uniform_over_81_offsets():
    rng = make_rng(1)
    n = 10_000
    counts = np.zeros((9, 9))
    for _ in range(n):
        s = sample_mask(16, 16, rng)
        counts[s.r, s.c] += 1
    p = 1 / 81
    sigma = np.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() < 5 * sigma


def test_corner_block_layout():
    sm = build_source_map(MaskSpec(16, 16, 0, 0))
    used = set(zip(sm.u[sm.masked].tolist(), sm.v[sm.masked].tolist()))
    assert used == {(1, 0), (0, 1), (1, 1)}


def test_centered_block_uses_all_eight_offsets():
    sm = build_source_map(MaskSpec(16, 16, 4, 4))
    used = set(zip(sm.u[sm.masked].tolist(), sm.v[sm.masked].tolist()))
    assert used == set(OFFSETS) - {(0, 0)}


@pytest.mark.parametrize("n", [8, 16])
def test_source_map_exhaustive(n):
    half = n // 2
    for spec in all_specs(n):
        sm = build_source_map(spec)
        ys, xs = np.mgrid[:n, :n]
        assert np.isin(sm.u, [-1, 0, 1]).all() and np.isin(sm.v, [-1, 0, 1]).all()
        # the source lies in the block and undoing the offset lands on it
        assert (sm.src_x >= 0).all() and (sm.src_x < half).all()
        assert (sm.src_y >= 0).all() and (sm.src_y < half).all()
        assert np.array_equal(xs - sm.u * half - spec.c, sm.src_x)
        assert np.array_equal(ys - sm.v * half - spec.r, sm.src_y)
        # uniqueness: no other offset also lands inside the block
        for du, dv in OFFSETS:
            lx = xs - du * half - spec.c
            ly = ys - dv * half - spec.r
            inside = (lx >= 0) & (lx < half) & (ly >= 0) & (ly < half)
            assert np.array_equal(inside, (sm.u == du) & (sm.v == dv))
        rows, cols = spec.block_slices()
        expect = np.ones((n, n), dtype=bool)
        expect[rows, cols] = False
        assert np.array_equal(sm.masked, expect)
        assert sm.masked.sum() == n * n - half * half
        # each (block cell, offset) pair is used at most once
        keys = set(zip(sm.u.ravel(), sm.v.ravel(), sm.src_x.ravel(), sm.src_y.ravel()))
        assert len(keys) == n * n


def test_partition_translates_with_block():
    for r, c in product(range(4), repeat=2):
        a = build_source_map(MaskSpec(8, 8, r, c))
        b = build_source_map(MaskSpec(8, 8, r + 1, c + 1))
        assert np.array_equal(a.u[:-1, :-1], b.u[1:, 1:])
        assert np.array_equal(a.v[:-1, :-1], b.v[1:, 1:])


def test_offset_index_matches_table():
    sm = build_source_map(MaskSpec(8, 8, 2, 3))
    idx = sm.offset_index()
    for y, x in product(range(8), repeat=2):
        assert OFFSETS[idx[y, x]] == (sm.u[y, x], sm.v[y, x])


def _block_case(seed, n=4, c=3, std=0.3):
    rng = make_rng(seed)
    coeffs = block_coeffs(CoeffSet.random(c, rng, std=std))
    return rng.normal(size=(n // 2, n // 2, c)), coeffs


def test_blockwise_needs_block_unit():
    feats, coeffs = _block_case(0)
    with pytest.raises(ValueError):
        blockwise_predict(feats, MaskSpec(4, 4, 0, 0), CoeffSet.random(3, make_rng(0)))
    with pytest.raises(ValueError):
        blockwise_predict(feats[:1], MaskSpec(4, 4, 0, 0), coeffs)


def test_blockwise_zero_coeffs_tiles_block():
    feats, _ = _block_case(1)
    out = blockwise_predict(feats, MaskSpec(4, 4, 0, 0), block_coeffs(CoeffSet.zeros(3))).data
    assert np.array_equal(out, np.tile(feats, (2, 2, 1)))


def test_blockwise_unrolled_4x4():
    feats, c = _block_case(2)
    spec = MaskSpec(4, 4, 1, 1)
    out = blockwise_predict(feats, spec, c).data
    sm = build_source_map(spec)
    dirs = {1: (Direction.RIGHT, Direction.DOWN), -1: (Direction.LEFT, Direction.UP)}
    for y, x in product(range(4), repeat=2):
        u, v = int(sm.u[y, x]), int(sm.v[y, x])
        z = feats[sm.src_y[y, x], sm.src_x[y, x]]
        if u and v:
            hz, vz = dirs[u][0], dirs[v][1]
            want = 0.5 * (step(step(z, hz, c), vz, c) + step(step(z, vz, c), hz, c))
        elif u:
            want = step(z, dirs[u][0], c)
        elif v:
            want = step(z, dirs[v][1], c)
        else:
            want = z
        assert np.allclose(out[y, x], want, atol=1e-14)


def test_blockwise_corner_matches_multi_step():
    feats, c = _block_case(3, n=8)
    out = blockwise_predict(feats, MaskSpec(8, 8, 0, 0), c).data
    assert np.array_equal(out[:4, 4:], multi_step(feats, c, 1, 0))
    assert np.array_equal(out[4:, :4], multi_step(feats, c, 0, 1))
    assert np.array_equal(out[4:, 4:], multi_step(feats, c, 1, 1))


@pytest.mark.parametrize("n", [8, 16])
def test_blockwise_identity_on_unmasked(n):
    rng = make_rng(n)
    coeffs = block_coeffs(CoeffSet.random(2, rng, std=0.5))
    feats = rng.normal(size=(n // 2, n // 2, 2))
    for spec in all_specs(n):
        rows, cols = spec.block_slices()
        assert np.array_equal(blockwise_predict(feats, spec, coeffs).data[rows, cols], feats)


def test_pixel_mask_counts():
    assert masked_pixel_mask(MaskSpec(2, 2, 0, 0), 1).sum() == 3
    m = masked_pixel_mask(MaskSpec(16, 16, 0, 0), 16)
    assert m.shape == (256, 256) and m.sum() == 49152
    with pytest.raises(ValueError):
        masked_pixel_mask(MaskSpec(2, 2, 0, 0), 0)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_pixel_mask_complement_is_block(r, c, patch):
    spec = MaskSpec(8, 8, r, c)
    m = masked_pixel_mask(spec, patch)
    footprint = np.zeros_like(m)
    footprint[r * patch:(r + 4) * patch, c * patch:(c + 4) * patch] = True
    assert np.array_equal(~m, footprint)
    assert m.sum() == patch**2 * (64 - 16)
