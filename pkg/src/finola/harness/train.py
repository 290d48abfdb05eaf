"""Deterministic training loop.

All randomness (batch order, mask placement) is drawn from streams keyed by
(seed, epoch), so a run resumed from a checkpoint replays exactly the same
batches as an uninterrupted one.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import OptimState, adamw_step, backward, cosine_warmup_lr
from ..masking import MaskSpec, masked_pixel_mask, sample_mask
from ..models import Checkpoint, ModelConfig, init_params, leaves, pipeline_loss, reconstruct
from ..numerics import make_rng
from .config import TrainConfig
from .data import mean_psnr

log = logging.getLogger(__name__)

_BATCH_STREAM = 1
_MASK_STREAM = 2


@dataclass
class RunMetrics:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)  # (step, psnr or masked mse)
    wall_clock: float = 0.0

    def loss_rows(self) -> list[dict]:
        return [{"step": s, "loss": l, "lr": r} for s, l, r in zip(self.steps, self.losses, self.lrs)]

    def eval_rows(self, metric: str) -> list[dict]:
        return [{"step": s, metric: v} for s, v in self.evals]


def batch_for_step(step: int, n_images: int, batch_size: int, seed: int) -> tuple[np.ndarray, int]:
    """Image indices for ``step`` and the epoch they belong to."""
    per_epoch = max(1, -(-n_images // batch_size))
    epoch, k = divmod(step, per_epoch)
    perm = make_rng(seed, _BATCH_STREAM, epoch).permutation(n_images)
    return perm[k * batch_size:(k + 1) * batch_size], epoch


def masks_for(cfg: ModelConfig, epoch: int, indices) -> list[MaskSpec] | None:
    """A fresh mask per image per epoch."""
    if cfg.variant == "finola":
        return None
    return [sample_mask(cfg.grid, cfg.grid, make_rng(cfg.seed, _MASK_STREAM, epoch, int(i))) for i in indices]


def all_masks(cfg: ModelConfig) -> list[MaskSpec]:
    half = cfg.grid // 2
    return [MaskSpec(cfg.grid, cfg.grid, r, c) for r in range(half + 1) for c in range(half + 1)]


def masked_mse(params, cfg: ModelConfig, images) -> float:
    """Masked-region MSE averaged over every image and every block position."""
    specs = all_masks(cfg)
    total = 0.0
    for s in specs:
        recon = reconstruct(params, cfg, images, [s] * len(images))
        m = masked_pixel_mask(s, cfg.downsample)
        total += float(np.mean((recon - images)[:, m] ** 2))
    return total / len(specs)


def evaluate(params, cfg: ModelConfig, images) -> float:
    """Mean PSNR for the plain model, masked-region MSE for masked variants."""
    if cfg.variant == "finola":
        return mean_psnr(reconstruct(params, cfg, images), images)
    return masked_mse(params, cfg, images)


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    images: np.ndarray,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    stop_step: int | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Train from scratch (or from ``resume``) up to ``tcfg.total_steps``.

    ``stop_step`` halts early while keeping the schedule of the full run, which
    is how resumable partial runs are produced.
    """
    images = np.asarray(images, dtype=np.float64)
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        state = resume.optim
        start = resume.step
    else:
        params = init_params(cfg)
        state = OptimState.for_params(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        start = 0
    end = tcfg.total_steps if stop_step is None else min(stop_step, tcfg.total_steps)
    metrics = RunMetrics()
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(start, end):
        idx, epoch = batch_for_step(step, len(images), tcfg.batch_size, cfg.seed)
        specs = masks_for(cfg, epoch, idx)
        p = leaves(params)
        loss = pipeline_loss(p, cfg, images[idx], specs)
        backward(loss)
        lr = cosine_warmup_lr(step + 1, tcfg.warmup_steps, tcfg.total_steps, tcfg.lr)
        params = adamw_step(params, {k: v.grad for k, v in p.items()}, state, lr)
        metrics.steps.append(step)
        metrics.losses.append(float(loss.value))
        metrics.lrs.append(lr)
        done = step + 1
        if tcfg.eval_every and (done % tcfg.eval_every == 0 or done == end):
            score = evaluate(params, cfg, images)
            metrics.evals.append((done, score))
            log.info("step %d loss %.6g eval %.4f", done, float(loss.value), score)
            if cfg.variant == "finola" and tcfg.target_psnr is not None and score > tcfg.target_psnr:
                end = done
                break
        if out_dir is not None and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
            Checkpoint(cfg, params, state, done).save(out_dir / f"step{done:06d}.fnla")
    metrics.wall_clock = time.perf_counter() - t0
    return Checkpoint(cfg, params, state, end), metrics
