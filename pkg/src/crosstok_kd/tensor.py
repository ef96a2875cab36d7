"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op here records a closure mapping the upstream gradient to one gradient
per parent. Shapes are explicit: apart from the bias-add case of :func:`add`
nothing broadcasts, and mismatches raise :class:`ShapeError`.

Tensors hold at most three axes. Row-wise ops (softmax, normalisation,
reductions named ``*_last``) always act on the last axis.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "ShapeError",
    "Tensor",
    "abs_",
    "add",
    "affine",
    "clamp",
    "concat_last",
    "div",
    "exp",
    "gather_rows",
    "gelu",
    "layer_norm",
    "leaky_relu",
    "log",
    "log_softmax_rows",
    "l2_normalize_rows",
    "matmul",
    "mean",
    "mul",
    "pick_last",
    "reshape",
    "scale",
    "sigmoid",
    "slice_last",
    "softmax_rows",
    "std_normalize_rows",
    "sub",
    "sum_",
    "sum_last",
    "transpose",
]

MAX_DIMS = 3
STD_EPS = 1e-8


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "degenerate")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_DIMS:
            raise ShapeError(f"tensors have at most {MAX_DIMS} axes, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.degenerate: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Leaves accumulate across calls; intermediate nodes get a fresh ``grad``
        on each call.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.degenerate = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may also be a 1-D bias matching ``a``'s last axis."""
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        n = b.shape[0]
        return _node(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping took effect."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return _node(out, (a,), lambda g: (np.where(inside, g, 0.0),))


# shape ops -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (B,m,k)@(B,k,n) and (B,m,k)@(k,n)."""
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3 and b.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if ok and a.ndim == 2 and b.ndim == 3:
        ok = False
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.ndim == b.ndim:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _node(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    if out.ndim > MAX_DIMS:
        raise ShapeError(f"reshape: at most {MAX_DIMS} axes, got {out.shape}")
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shapes {[q.shape for q in parts]} differ")
    bounds = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _node(out, parts, lambda g: tuple(np.split(g, bounds, axis=-1)))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(out, (a,), backward)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Look up rows of a 2-D table; output shape is ``idx.shape + (d,)``."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got shape {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]
    d = table.shape[1]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, d))
        return (full,)

    return _node(out, (table,), backward)


def pick_last(a: Tensor, idx) -> Tensor:
    """Select one entry per row along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick_last: index shape {idx.shape} vs tensor shape {a.shape}")
    expanded = idx[..., None]
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), backward)


# reductions ------------------------------------------------------------------


def sum_(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def sum_last(a: Tensor) -> Tensor:
    return _node(a.data.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], a.shape).copy(),))


# composite layers ------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b``."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, optionally restricted to ``mask``.

    Masked entries are treated as -inf logits and come out exactly zero. A row
    with no admissible entry comes out all-zero and is flagged in
    ``out.degenerate`` (boolean array over the leading axes).
    """
    z = x.data
    if mask is None:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        degenerate = np.zeros(z.shape[:-1], dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        shifted = np.where(m, z, -np.inf)
        top = shifted.max(axis=-1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, z, 0.0) - top), 0.0)
        total = e.sum(axis=-1, keepdims=True)
        degenerate = total[..., 0] == 0.0
        y = e / np.where(total == 0.0, 1.0, total)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    out = _node(y, (x,), backward)
    out.degenerate = degenerate
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data
    top = z.max(axis=-1, keepdims=True)
    lse = top + np.log(np.exp(z - top).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), backward)


def std_normalize_rows(x: Tensor, eps: float = STD_EPS) -> Tensor:
    """Divide each row by its population standard deviation (no centering).

    Rows whose std falls below ``eps`` are divided by ``std + eps`` instead.
    """
    z = x.data
    n = z.shape[-1]
    if n < 2:
        raise ContractError(f"std_normalize_rows needs rows of length >= 2, got {n}")
    centered = z - z.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered**2).mean(axis=-1, keepdims=True))
    denom = np.where(std < eps, std + eps, std)
    out = z / denom

    def backward(g):
        safe = np.where(std > 0, std, 1.0)
        dstd = np.where(std > 0, centered / (n * safe), 0.0)
        return (g / denom - (g * z).sum(axis=-1, keepdims=True) / denom**2 * dstd,)

    return _node(out, (x,), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    z = x.data
    norm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = z / denom

    def backward(g):
        inner = (g * z).sum(axis=-1, keepdims=True)
        return (g / denom - np.where(norm > eps, z * inner / denom**3, 0.0),)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    z = x.data
    n = z.shape[-1]
    mu = z.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((z - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (z - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _node(out, (x, gamma, beta), backward)
