import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finola.core import (
    CoeffSet,
    Direction,
    FeatureGrid,
    NormStats,
    StepUnit,
    construction_passes,
    default_origin,
    generate_frozen,
    generate_parallel,
    generate_sequential,
    load_grid,
    multi_step,
    normalize,
    pass_stats,
    save_grid,
    step,
)
from finola.numerics import make_rng
from finola.pde import recurrence_residual

seeds = st.integers(0, 2**32 - 1)


def rand_instance(seed, c=6, std=None):
    rng = make_rng(seed)
    return rng.normal(size=c), CoeffSet.random(c, rng, std=std)


# -- normalize / step ------------------------------------------------------------


def test_normalize_hand_cases():
    assert np.array_equal(normalize(np.full(5, 3.0)), np.zeros(5))
    assert np.allclose(normalize(np.array([1.0, -1.0])), [1.0, -1.0], atol=2e-6)
    s = np.sqrt(2.0 / 3.0)
    assert np.allclose(normalize(np.array([1.0, 2.0, 3.0]), eps=1e-12), [-1 / s, 0.0, 1 / s], atol=1e-9)


@given(seeds)
@settings(max_examples=50, deadline=None)
def test_normalize_idempotent_up_to_eps(seed):
    v = make_rng(seed).normal(size=9)
    v = (v - v.mean()) / v.std()
    once = normalize(v)
    assert np.abs(normalize(once) - once).max() < 10 * 1e-6 * np.abs(v).max()
    assert abs(once.mean()) < 1e-12


def test_step_hand_cases():
    rng = make_rng(0)
    z = rng.normal(size=4)
    assert np.array_equal(step(z, Direction.RIGHT, CoeffSet.zeros(4)), z)
    const = np.full(4, 1.7)
    assert np.allclose(step(const, Direction.DOWN, CoeffSet.random(4, rng, std=1.0)), const)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    c = CoeffSet(swap, swap, swap, swap, eps=1e-15)
    assert np.allclose(step(np.array([1.0, -1.0]), Direction.RIGHT, c), [0.0, 0.0], atol=1e-12)


def test_step_uses_direction_matrix():
    rng = make_rng(1)
    mats = [rng.normal(size=(3, 3)) for _ in range(4)]
    c = CoeffSet(*mats)
    z = rng.normal(size=3)
    for d, m in zip([Direction.RIGHT, Direction.DOWN, Direction.LEFT, Direction.UP], mats):
        assert np.allclose(step(z, d, c), z + m @ normalize(z))


def test_step_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        step(np.ones(3), Direction.RIGHT, CoeffSet.zeros(4))


def test_coeffset_validation():
    with pytest.raises(ValueError):
        CoeffSet(np.eye(2), np.eye(3), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        CoeffSet.zeros(2, eps=0.0)


# -- multi_step ------------------------------------------------------------------


def test_multi_step_identity():
    q, c = rand_instance(3)
    assert np.array_equal(multi_step(q, c, 0, 0), q)


def test_multi_step_unrolled_oracle():
    q, c = rand_instance(4, c=4, std=0.3)
    r, d = Direction.RIGHT, Direction.DOWN
    hv = step(step(step(q, r, c), r, c), d, c)
    vh = step(step(step(q, d, c), r, c), r, c)
    assert np.allclose(multi_step(q, c, 2, 1), 0.5 * (hv + vh), atol=1e-14)
    left_up = 0.5 * (step(step(q, Direction.LEFT, c), Direction.UP, c) + step(step(q, Direction.UP, c), Direction.LEFT, c))
    assert np.allclose(multi_step(q, c, -1, -1), left_up, atol=1e-14)


def test_multi_step_symmetric_operators():
    rng = make_rng(5)
    a = rng.normal(scale=0.3, size=(4, 4))
    c = CoeffSet(a, a, a, a)
    q = rng.normal(size=4)
    single = q
    for _ in range(5):
        single = step(single, Direction.RIGHT, c)
    assert np.allclose(multi_step(q, c, 3, 2), single, atol=1e-14)


# -- generation ------------------------------------------------------------------


def brute_force(q, c, h, w, origin):
    x0, y0 = origin
    out = np.empty((h, w, q.size))
    for y in range(h):
        for x in range(w):
            u, v = x - x0, y - y0
            hd = Direction.RIGHT if u > 0 else Direction.LEFT
            vd = Direction.DOWN if v > 0 else Direction.UP
            a = q
            for _ in range(abs(u)):
                a = step(a, hd, c)
            for _ in range(abs(v)):
                a = step(a, vd, c)
            b = q
            for _ in range(abs(v)):
                b = step(b, vd, c)
            for _ in range(abs(u)):
                b = step(b, hd, c)
            out[y, x] = a if u == 0 or v == 0 else 0.5 * (a + b)
    return out


def test_sequential_trivial_cases():
    q, c = rand_instance(6)
    g = generate_sequential(q, c, 1, 1)
    assert np.array_equal(g.data[0, 0], q)
    flat = generate_sequential(q, CoeffSet.zeros(6), 4, 5)
    assert np.array_equal(flat.data, np.broadcast_to(q, (4, 5, 6)))


def test_sequential_matches_brute_force():
    q, c = rand_instance(7, c=5, std=0.3)
    g = generate_sequential(q, c, 5, 5)
    assert g.origin == (2, 2)
    assert np.allclose(g.data, brute_force(q, c, 5, 5, (2, 2)), atol=1e-13)


def test_default_origin():
    assert default_origin(16, 16) == (8, 8)
    assert default_origin(4, 6) == (3, 2)
    assert default_origin(1, 1) == (0, 0)


@given(seeds, st.integers(1, 7), st.integers(1, 7), st.data())
@settings(max_examples=40, deadline=None)
def test_parallel_matches_sequential(seed, h, w, data):
    origin = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    q, c = rand_instance(seed, c=4, std=0.2)
    seq = generate_sequential(q, c, h, w, origin)
    par = generate_parallel(q, c, h, w, origin)
    assert np.abs(seq.data - par.data).max() < 1e-9


def test_parallel_corner_origin_uses_forward_matrices_only():
    rng = make_rng(8)
    q = rng.normal(size=4)
    a, b = rng.normal(scale=0.2, size=(2, 4, 4))
    junk = np.full((4, 4), np.nan)
    c = CoeffSet(a, b, junk, junk)
    g = generate_parallel(q, c, 5, 5, origin=(0, 0))
    assert np.isfinite(g.data).all()
    assert np.abs(g.data - generate_sequential(q, c, 5, 5, (0, 0)).data).max() < 1e-9


def test_parallel_zero_coeffs_constant():
    q = make_rng(9).normal(size=3)
    g = generate_parallel(q, CoeffSet.zeros(3), 6, 6)
    assert np.array_equal(g.data, np.broadcast_to(q, (6, 6, 3)))


@pytest.mark.parametrize("workers", [2, 3, 7])
def test_parallel_independent_of_workers(workers):
    q, c = rand_instance(10, c=8, std=0.1)
    base = generate_parallel(q, c, 19, 37).data
    assert np.array_equal(generate_parallel(q, c, 19, 37, workers=workers).data, base)


def test_origin_translation():
    q, c = rand_instance(11, c=4, std=0.2)
    big = generate_parallel(q, c, 8, 8, origin=(4, 4)).data
    small = generate_parallel(q, c, 5, 5, origin=(2, 2)).data
    assert np.allclose(big[2:7, 2:7], small, atol=1e-14)


def test_generation_rejects_block_unit_and_bad_origin():
    q, c = rand_instance(12)
    blocky = CoeffSet(c.A, c.B, c.A_minus, c.B_minus, step_unit=StepUnit.BLOCK)
    with pytest.raises(ValueError):
        generate_parallel(q, blocky, 4, 4)
    with pytest.raises(ValueError):
        generate_sequential(q, c, 4, 4, origin=(4, 0))


def test_construction_path_residuals():
    q, c = rand_instance(13, c=8, std=0.2)
    h_first, v_first = construction_passes(q, c, 9, 9)
    x0, y0 = h_first.origin
    # horizontal-first: every column obeys the vertical recurrence
    assert recurrence_residual(h_first, c, Direction.DOWN)[y0:].max() < 1e-12
    assert recurrence_residual(h_first, c, Direction.UP)[:y0].max() < 1e-12
    assert recurrence_residual(h_first, c, Direction.RIGHT)[y0, x0:].max() < 1e-12
    assert recurrence_residual(h_first, c, Direction.LEFT)[y0, :x0].max() < 1e-12
    # vertical-first: the mirrored statements
    assert recurrence_residual(v_first, c, Direction.RIGHT)[:, x0:].max() < 1e-12
    assert recurrence_residual(v_first, c, Direction.LEFT)[:, :x0].max() < 1e-12
    assert recurrence_residual(v_first, c, Direction.DOWN)[y0:, x0].max() < 1e-12
    assert recurrence_residual(v_first, c, Direction.UP)[:y0, x0].max() < 1e-12


# -- frozen statistics -------------------------------------------------------------


def test_frozen_self_consistency():
    q, c = rand_instance(14, c=8, std=0.3)
    stats = pass_stats(q, c, 6, 6)
    frozen = generate_frozen(q, c, stats, 6, 6)
    assert np.abs(frozen.data - generate_parallel(q, c, 6, 6).data).max() < 1e-12


def test_frozen_unit_stats_is_linear_recurrence():
    rng = make_rng(15)
    q = rng.normal(size=3)
    c = CoeffSet.random(3, rng, std=0.2)
    stats = NormStats(np.zeros((1, 4)), np.full((1, 4), 1.0 - 1e-6))
    g = generate_frozen(q, c, stats, 1, 4, origin=(0, 0))
    z = q
    for x in range(4):
        assert np.allclose(g.data[0, x], z, atol=1e-14)
        z = z + c.A @ z


def test_frozen_shape_mismatch():
    q, c = rand_instance(16)
    with pytest.raises(ValueError):
        generate_frozen(q, c, NormStats(np.zeros((3, 3)), np.ones((3, 3))), 4, 4)


def test_normstats_validation():
    # zero sigma is legal (constant vectors); eps keeps the division finite
    NormStats(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        NormStats(np.zeros((2, 2)), np.full((2, 2), -1.0))
    with pytest.raises(ValueError):
        NormStats(np.zeros((2, 2)), np.ones((3, 2)))


# -- dumps -----------------------------------------------------------------------


def test_grid_dump_roundtrip(tmp_path):
    q, c = rand_instance(17)
    g = generate_parallel(q, c, 3, 5, origin=(1, 2))
    save_grid(g, tmp_path / "g.fgrd")
    back = load_grid(tmp_path / "g.fgrd")
    assert back.origin == (1, 2)
    assert back.data.tobytes() == g.data.tobytes()
    raw = (tmp_path / "g.fgrd").read_bytes()
    assert raw[:4] == b"FGRD" and len(raw) == 26 + 3 * 5 * 6 * 8


def test_grid_dump_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.fgrd"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_grid(p)


def test_feature_grid_validation():
    with pytest.raises(ValueError):
        FeatureGrid(np.zeros((2, 2, 1)), (2, 0))
    with pytest.raises(ValueError):
        FeatureGrid(np.full((2, 2, 1), np.nan), (0, 0))
