"""Dense linear algebra and seeded random streams shared by the rest of the package.

Arrays are plain ``numpy.ndarray`` in float64. Grids use (y, x, channel) order.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "SingularMatrix",
    "NotSymmetric",
    "matmul",
    "solve_or_invert",
    "eig_sym",
    "make_rng",
]


class SingularMatrix(ValueError):
    pass


class NotSymmetric(ValueError):
    pass


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul expects vectors or matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def solve_or_invert(m, cond_limit: float = 1e12) -> tuple[np.ndarray, float]:
    """Invert ``m`` by Gauss-Jordan elimination with partial pivoting.

    Returns ``(inverse, cond)`` where ``cond`` is the 1-norm condition
    estimate ``|m|_1 * |m^-1|_1``. Raises :class:`SingularMatrix` if the
    pivot ratio drops below 1e-12 or ``cond`` exceeds ``cond_limit``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    aug = np.hstack([m, np.eye(n)])
    pivots = np.empty(n)
    for col in range(n):
        p = col + int(np.argmax(np.abs(aug[col:, col])))
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        pivots[col] = aug[col, col]
        if pivots[col] == 0.0:
            raise SingularMatrix("zero pivot encountered")
        aug[col] /= pivots[col]
        others = np.arange(n) != col
        aug[others] -= np.outer(aug[others, col], aug[col])
    mags = np.abs(pivots)
    if mags.min() / mags.max() < 1e-12:
        raise SingularMatrix(f"pivot ratio {mags.min() / mags.max():.3e} below 1e-12")
    inv = aug[:, n:]
    cond = float(np.abs(m).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())
    if cond > cond_limit:
        raise SingularMatrix(f"condition estimate {cond:.3e} exceeds limit {cond_limit:.3e}")
    return inv, cond


def eig_sym(cov, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(cov, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > 1e-9 * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-9")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(np.sqrt(np.sum(a * a)), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` keys derive independent children.

    ``make_rng(s, k)`` is the k-th child of seed ``s``; the same keys always give
    the same stream, on any platform.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in stream))))
