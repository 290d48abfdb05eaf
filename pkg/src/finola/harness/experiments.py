"""Toy-scale ablations and embedding-space experiments on trained checkpoints."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import NormStats, generate_frozen, generate_parallel, pass_stats
from ..masking import MaskSpec
from ..models import (
    Checkpoint,
    ModelConfig,
    coeffs_from_params,
    decode_grid,
    decode_q,
    encode,
    leaves,
    pipeline_forward,
    reconstruct,
)
from ..numerics import eig_sym
from ..pde import CurvatureReport, rank_channels
from .config import TrainConfig
from .data import mean_psnr, tile, write_ppm
from .train import train


def channel_sweep(cfg: ModelConfig, tcfg: TrainConfig, images, channels) -> list[dict]:
    """Train one model per channel count on the same data and seed."""
    rows = []
    for c in channels:
        run_cfg = ModelConfig(**{**cfg.to_dict(), "channels": int(c)})
        ckpt, _ = train(run_cfg, tcfg, images)
        recon = np.clip(reconstruct(ckpt.params, run_cfg, images), 0.0, 1.0)
        rows.append({"channels": int(c), "mse": float(np.mean((recon - images) ** 2)), "psnr": mean_psnr(recon, images)})
    return rows


def norm_stats(params, cfg: ModelConfig, images) -> NormStats:
    """Dataset average of the per-position statistics each generation pass normalizes with."""
    coeffs = coeffs_from_params(params, cfg)
    qs = encode(params, cfg, images)
    stats = [pass_stats(q, coeffs, cfg.grid, cfg.grid) for q in qs]
    return NormStats(np.mean([s.mu for s in stats], axis=0), np.mean([s.sigma for s in stats], axis=0))


def frozen_norm_eval(ckpt: Checkpoint, images, stats: NormStats | None = None) -> tuple[float, float]:
    """PSNR with per-vector normalization vs. with frozen dataset statistics.

    ``stats`` defaults to the averages over ``images`` themselves.
    """
    cfg = ckpt.config
    if cfg.variant != "finola":
        raise ValueError("frozen-norm evaluation needs a finola-variant checkpoint")
    images = np.asarray(images, dtype=np.float64)
    params = ckpt.params
    stats = norm_stats(params, cfg, images) if stats is None else stats
    coeffs = coeffs_from_params(params, cfg)
    qs = encode(params, cfg, images)
    n = cfg.grid
    normal = np.stack([generate_parallel(q, coeffs, n, n).data for q in qs])
    frozen = np.stack([generate_frozen(q, coeffs, stats, n, n).data for q in qs])
    return (
        mean_psnr(decode_grid(params, cfg, normal), images),
        mean_psnr(decode_grid(params, cfg, frozen), images),
    )


# -- embedding space ---------------------------------------------------------------


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_vectors(cls, qs) -> "EmbeddingStats":
        """Mean and unbiased (N-1) covariance of the rows of ``qs``."""
        qs = np.asarray(qs, dtype=np.float64)
        if qs.shape[0] < 2:
            raise ValueError("need at least two vectors")
        mean = qs.mean(axis=0)
        d = qs - mean
        cov = d.T @ d / (qs.shape[0] - 1)
        return cls(mean, 0.5 * (cov + cov.T))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w, v = eig_sym(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean + rng.standard_normal((n, self.mean.size)) @ root.T

    def pca_project(self, qs, k: int) -> np.ndarray:
        """Reconstruct ``qs`` from their top-``k`` principal components."""
        c = self.mean.size
        if not 1 <= k <= c:
            raise ValueError(f"k must be in [1, {c}], got {k}")
        _, v = eig_sym(self.cov)
        vk = v[:, :k]
        return self.mean + (np.asarray(qs) - self.mean) @ vk @ vk.T


def interpolate(q1, q2, alphas) -> np.ndarray:
    """Rows ``a q1 + (1 - a) q2`` for each ``a``."""
    a = np.asarray(alphas, dtype=np.float64)[:, None]
    return a * np.asarray(q1) + (1.0 - a) * np.asarray(q2)


def embedding_experiments(
    ckpt: Checkpoint,
    images,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
    alphas=(0.0, 0.25, 0.5, 0.75, 1.0),
    n_samples: int = 8,
    ks=None,
) -> dict:
    """Interpolation, mean/mirror, Gaussian sampling and PCA reconstructions.

    Returns the decoded image sets and the :class:`EmbeddingStats`; when
    ``out_dir`` is given each set is also written as a PPM contact sheet.
    """
    cfg = ckpt.config
    if cfg.variant != "finola":
        raise ValueError("embedding experiments need a finola-variant checkpoint")
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ValueError("need at least two images")
    params = ckpt.params
    qs = encode(params, cfg, images)
    stats = EmbeddingStats.from_vectors(qs)
    c = cfg.channels
    ks = ks or sorted({1, max(1, c // 4), max(1, c // 2), c})
    if max(ks) > c:
        raise ValueError(f"PCA rank {max(ks)} exceeds channel count {c}")
    out = {
        "stats": stats,
        "recon": decode_q(params, cfg, qs),
        "interpolation": decode_q(params, cfg, interpolate(qs[0], qs[1], alphas)),
        "mean": decode_q(params, cfg, stats.mean[None]),
        "mirror": decode_q(params, cfg, 2.0 * qs - stats.mean),
        "samples": decode_q(params, cfg, stats.sample(n_samples, rng)),
        "pca": {k: decode_q(params, cfg, stats.pca_project(qs, k)) for k in ks},
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(out_dir / "originals.ppm", tile(images))
        for key in ("recon", "interpolation", "mean", "mirror", "samples"):
            write_ppm(out_dir / f"{key}.ppm", tile(np.clip(out[key], 0, 1)))
        for k, imgs in out["pca"].items():
            write_ppm(out_dir / f"pca_k{k:03d}.ppm", tile(np.clip(imgs, 0, 1)))
    return out


# -- curvature -----------------------------------------------------------------------


def latent_grids(params, cfg: ModelConfig, images, specs: list[MaskSpec] | None = None) -> np.ndarray:
    """The FINOLA-generated grid per image (before any decoder transformer)."""
    _, aux = pipeline_forward(leaves(params, False), cfg, images, specs)
    return aux["grid"].value


def curvature_reports(params, cfg: ModelConfig, images, specs=None) -> list[CurvatureReport]:
    return [rank_channels(g) for g in latent_grids(params, cfg, images, specs)]
