from __future__ import annotations

import time

import numpy as np

from ..core import CoeffSet, generate_parallel, generate_sequential
from ..numerics import make_rng

TOLERANCE = 1e-9


class EquivalenceError(AssertionError):
    pass


def _timed(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return out, best


def bench(channels, sizes, threads=(1,), seed: int = 0, repeats: int = 3) -> list[dict]:
    """Time sequential vs two-pass generation; one row per (C, size, threads).

    Every run also checks the two outputs agree within 1e-9 and raises
    :class:`EquivalenceError` otherwise.
    """
    rows = []
    for c in channels:
        for n in sizes:
            rng = make_rng(seed, c, n)
            coeffs = CoeffSet.random(c, rng)
            q = rng.standard_normal(c)
            seq, t_seq = _timed(lambda: generate_sequential(q, coeffs, n, n), repeats)
            for k in threads:
                par, t_par = _timed(lambda: generate_parallel(q, coeffs, n, n, workers=k), repeats)
                diff = float(np.abs(seq.data - par.data).max())
                if diff >= TOLERANCE:
                    raise EquivalenceError(f"C={c} size={n} threads={k}: max |diff| {diff:.3e}")
                rows.append({
                    "channels": c,
                    "size": n,
                    "threads": k,
                    "sequential_s": t_seq,
                    "parallel_s": t_par,
                    "speedup": t_seq / t_par,
                    "max_abs_diff": diff,
                })
    return rows
