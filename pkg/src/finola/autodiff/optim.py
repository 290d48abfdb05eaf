from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# pre-training defaults for FINOLA runs
BASE_LR = 1.5e-4
WEIGHT_DECAY = 0.1
BETAS = (0.9, 0.999)


@dataclass
class OptimState:
    lr: float = BASE_LR
    beta1: float = BETAS[0]
    beta2: float = BETAS[1]
    eps: float = 1e-8
    weight_decay: float = WEIGHT_DECAY
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "OptimState":
        st = cls(**kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        return st


def decays(name: str, p: np.ndarray) -> bool:
    """Weight decay applies to matrices and kernels, not biases or vectors."""
    return p.ndim >= 2


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, lr: float | None = None) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay. Returns new parameter arrays."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        new = p * (1.0 - lr * state.weight_decay) if decays(name, p) else p
        out[name] = new - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def cosine_warmup_lr(step: int, warmup: int, total: int, base: float) -> float:
    """Linear ramp ``base * step / warmup`` up to ``warmup``, then half-cosine to 0 at ``total``."""
    if step <= 0:
        return 0.0
    if warmup > 0 and step <= warmup:
        return base * step / warmup
    if step >= total:
        return 0.0
    frac = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))
