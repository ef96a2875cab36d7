"""Row-wise divergences between probability distributions.

All six kinds take rows ``p`` and ``q`` over the same vocabulary and return
the mean per-row value over the masked positions. Logs are guarded by
clamping their arguments at ``1e-12``.

AKL blends forward and reverse KL with a per-row weight
``alpha = G_head / (G_head + G_tail)``, where the head is the smallest set of
entries (by descending ``p``) holding at least ``akl_mu`` of the mass and
``G`` sums ``|p - q|`` over a region. ``alpha`` is 0.5 when both gaps vanish.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

KINDS = ("kl", "rkl", "skl", "srkl", "akl", "jsd")
LOG_FLOOR = 1e-12
NORM_TOL = 1e-6


@dataclass(frozen=True)
class DivergenceKind:
    name: str = "kl"
    skew_lambda: float = 0.1
    akl_mu: float = 0.5

    def __post_init__(self):
        if self.name not in KINDS:
            raise ContractError(f"unknown divergence {self.name!r}; expected one of {KINDS}")
        if not 0.0 < self.skew_lambda < 1.0:
            raise ContractError("skew_lambda must lie in (0, 1)")
        if not 0.0 < self.akl_mu < 1.0:
            raise ContractError("akl_mu must lie in (0, 1)")


def _safe_log(x: Tensor) -> Tensor:
    return T.log(T.clamp(x, lo=LOG_FLOOR))


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    return T.sum_last(T.mul(p, T.sub(_safe_log(p), _safe_log(q))))


def _mix(a: Tensor, b: Tensor, lam: float) -> Tensor:
    return T.add(T.scale(a, lam), T.scale(b, 1.0 - lam))


def head_mask(p: np.ndarray, mu: float) -> np.ndarray:
    """Entries of the smallest descending-probability prefix reaching mass ``mu``."""
    order = np.argsort(-p, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    in_head = (before < mu).astype(np.float64)
    mask = np.empty_like(in_head)
    np.put_along_axis(mask, order, in_head, axis=-1)
    return mask


def akl_alpha(p: Tensor, q: Tensor, mu: float) -> Tensor:
    head = head_mask(p.data, mu)
    gap = T.abs_(T.sub(p, q))
    g_head = T.sum_last(T.mul(gap, Tensor(head)))
    g_tail = T.sum_last(T.mul(gap, Tensor(1.0 - head)))
    total = T.add(g_head, g_tail)
    zero = (total.data == 0.0).astype(np.float64)
    return T.div(T.add(g_head, Tensor(0.5 * zero)), T.add(total, Tensor(zero)))


def row_divergence(kind: DivergenceKind, p: Tensor, q: Tensor) -> Tensor:
    """Per-row divergence, shape ``p.shape[:-1]``."""
    if p.shape != q.shape:
        raise ContractError(f"divergence: p has shape {p.shape} but q has {q.shape}")
    name = kind.name
    if name == "kl":
        return kl_rows(p, q)
    if name == "rkl":
        return kl_rows(q, p)
    if name == "skl":
        return kl_rows(p, _mix(p, q, kind.skew_lambda))
    if name == "srkl":
        return kl_rows(q, _mix(q, p, kind.skew_lambda))
    if name == "jsd":
        m = T.scale(T.add(p, q), 0.5)
        return T.scale(T.add(kl_rows(p, m), kl_rows(q, m)), 0.5)
    alpha = akl_alpha(p, q, kind.akl_mu)
    one_minus = T.sub(Tensor(np.ones(alpha.shape)), alpha)
    return T.add(T.mul(alpha, kl_rows(p, q)), T.mul(one_minus, kl_rows(q, p)))


def _check_rows(name: str, x: Tensor, keep: np.ndarray) -> None:
    sums = x.data.sum(axis=-1)[keep]
    if sums.size and np.max(np.abs(sums - 1.0)) > NORM_TOL:
        raise ContractError(f"divergence: rows of {name} are not normalised (max |sum-1| = {np.max(np.abs(sums - 1.0)):.3g})")


def divergence(kind: DivergenceKind, p: Tensor, q: Tensor, mask=None) -> Tensor:
    """Mean divergence over rows selected by ``mask`` (all rows if None)."""
    keep = np.ones(p.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != p.shape[:-1]:
        raise ContractError(f"divergence: mask shape {keep.shape} vs rows {p.shape[:-1]}")
    count = keep.sum()
    if count == 0:
        raise ContractError("divergence: mask selects no rows")
    _check_rows("p", p, keep)
    _check_rows("q", q, keep)
    rows = row_divergence(kind, p, q)
    return T.scale(T.sum_(T.mul(rows, Tensor(keep.astype(np.float64)))), 1.0 / count)
