"""Finite-difference gradient checking and small fixtures shared by the tests."""
from __future__ import annotations

import numpy as np

from crosstok_kd.tensor import Tensor

H = 1e-5
ABS_FLOOR = 1e-6


def grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error; entries with tiny analytic gradient are compared absolutely."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    small = np.abs(a) < ABS_FLOOR
    rel = np.abs(a - n) / np.maximum(np.abs(a), np.abs(n)).clip(min=1e-300)
    err = np.where(small, np.abs(a - n), rel)
    return float(err.max()) if err.size else 0.0


def _entries(shape, max_entries, rng):
    every = list(np.ndindex(shape))
    if max_entries is None or len(every) <= max_entries:
        return every
    pick = rng.choice(len(every), size=max_entries, replace=False)
    return [every[i] for i in sorted(pick)]


def numeric_grad(loss_fn, t: Tensor, h: float = H, entries=None) -> np.ndarray:
    """Central differences; entries not listed in ``entries`` are left at nan."""
    base = t.data.copy()
    out = np.full_like(base, np.nan)
    for idx in entries if entries is not None else np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] += h
        t.data = bumped
        up = loss_fn().item()
        bumped = base.copy()
        bumped[idx] -= h
        t.data = bumped
        down = loss_fn().item()
        out[idx] = (up - down) / (2 * h)
    t.data = base
    return out


def check_gradients(loss_fn, params, h: float = H, max_entries: int | None = None, seed: int = 0) -> float:
    """Largest error over ``params`` between backward() and central differences.

    With ``max_entries`` only that many randomly chosen entries per parameter
    are differenced, which keeps checks on wide output heads affordable.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        entries = _entries(p.shape, max_entries, rng)
        numeric = numeric_grad(loss_fn, p, h, entries)
        idx = tuple(np.array(entries).T) if entries else ()
        worst = max(worst, grad_error(analytic[idx], numeric[idx]))
    return worst


def rand_tensor(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)
