from __future__ import annotations

import numpy as np

from .tape import Var, backward


def numeric_grad(f, x: np.ndarray, delta: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + delta
        fp = f(x)
        x[i] = old - delta
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * delta)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_grads(build, inputs: dict[str, np.ndarray], delta: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients with central differences for every input.

    ``build(vars)`` receives a dict of leaf Vars and returns a scalar Var.
    Returns the max relative error per input name.
    """
    leaves = {k: Var(v, requires_grad=True) for k, v in inputs.items()}
    loss = build(leaves)
    backward(loss)
    errors = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)

        def f(x, name=name):
            vals = {k: (Var(x) if k == name else Var(v)) for k, v in inputs.items()}
            return float(build(vals).value)

        errors[name] = max_rel_error(analytic, numeric_grad(f, inputs[name], delta))
    return errors
