"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one gradient tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error of every input gradient of ``fn(*tensors)``.

    Non-scalar outputs are contracted with a fixed random weighting so that
    every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)

    def loss_of(o: Tensor) -> Tensor:
        return o if o.ndim == 0 else T.sum(T.mul(o, Tensor(w)))

    analytic = T.grad(loss_of(out), tensors)

    def f():
        with T.no_grad():
            return float(loss_of(fn(*[Tensor(a) for a in arrays])).data)

    return max(relative_error(g, numeric_gradient(f, a, eps)) for g, a in zip(analytic, arrays))


def check_directional(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    directions: int = 2,
    eps: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-12,
) -> list[float]:
    """Per-parameter relative error of directional derivatives along random unit directions.

    Compares ``<grad, d>`` with ``(L(p + eps d) - L(p - eps d)) / (2 eps)``
    for each parameter tensor separately. ``floor`` bounds the denominator
    from below so that exactly-zero gradients are judged by absolute error.
    """
    rng = np.random.default_rng(seed)
    analytic = T.grad(loss_fn(), params)
    errors = []
    for p, g in zip(params, analytic):
        worst = 0.0
        for _ in range(directions):
            d = rng.standard_normal(p.shape)
            d /= np.linalg.norm(d)
            base = p.data.copy()
            p.data = base + eps * d
            with T.no_grad():
                fp = float(loss_fn().data)
            p.data = base - eps * d
            with T.no_grad():
                fm = float(loss_fn().data)
            p.data = base
            num = (fp - fm) / (2 * eps)
            ana = float(np.sum(g * d))
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        errors.append(worst)
    return errors
