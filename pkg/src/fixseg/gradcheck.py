"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """``df/dx`` by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error scaled by the max-norm of the reference gradient."""
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), floor)) if numeric.size else 0.0


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error over all inputs for ``sum(fn(*inputs) * W)`` with fixed random ``W``."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out0 = fn(*[Tensor(a) for a in arrays]).data
    W = np.random.default_rng(seed).standard_normal(out0.shape)

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * W).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*leaves)
        T.backward(T.sum_(out * Tensor(W)))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, arr, h)))
    return worst


def check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Worst relative error of ``d loss / d param`` for module parameters."""
    for p in params:
        p.grad = None
    with Tape():
        T.backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numeric_grad(lambda: float(loss_fn().data), p.data, h)))
    return worst
