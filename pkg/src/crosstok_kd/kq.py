"""Key-query distribution matching for cross-model attention.

Two adversaries are provided. :class:`Discriminator` separates teacher keys
from student queries (GA); :class:`Critic` embeds both and scores a
bidirectional conditional-transport cost between them (CT). In both cases
the query projector plays the generator and the adversary is stepped on its
own loss, so each loss function returns the adversary's loss (queries
detached) and the generator's loss (adversary parameters detached).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

KQ_MODES = ("none", "ga", "ct")
LOG_FLOOR = 1e-12
SIGMOID_CLIP = 30.0


@dataclass(frozen=True)
class KqMode:
    name: str = "none"
    weight: float = 1.0
    real_class: str = "query"

    def __post_init__(self):
        if self.name not in KQ_MODES:
            raise ContractError(f"unknown kq mode {self.name!r}")
        if self.weight < 0:
            raise ContractError("kq weight must be non-negative")
        if self.real_class not in ("query", "key"):
            raise ContractError("kq real_class must be 'query' or 'key'")


def _mlp_params(rng, sizes: list[int]) -> dict[str, Tensor]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        params[f"l{i}.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)), requires_grad=True)
        params[f"l{i}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return params


class _TwoLayer:
    slope = 0.2

    def __init__(self, sizes: list[int], seed: int):
        self.params = _mlp_params(np.random.default_rng(seed), sizes)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _forward(self, x: Tensor, detach_params: bool) -> Tensor:
        p = {k: v.detach() for k, v in self.params.items()} if detach_params else self.params
        h = T.leaky_relu(T.affine(x, p["l0.w"], p["l0.b"]), self.slope)
        return T.affine(h, p["l1.w"], p["l1.b"])


class Discriminator(_TwoLayer):
    """Two-layer perceptron giving P(row is of the positive class)."""

    def __init__(self, dim: int, hidden: int = 64, seed: int = 0):
        super().__init__([dim, hidden, 1], seed)

    def __call__(self, x: Tensor, detach_params: bool = False) -> Tensor:
        z = self._forward(x, detach_params)
        prob = T.sigmoid(T.clamp(z, -SIGMOID_CLIP, SIGMOID_CLIP))
        return T.reshape(prob, (x.shape[0],))


class Critic(_TwoLayer):
    """Feature map for the transport cost ``c(k, q) = 1 - cos(phi(k), phi(q))``."""

    def __init__(self, dim: int, hidden: int = 64, features: int = 32, seed: int = 0):
        super().__init__([dim, hidden, features], seed)

    def __call__(self, x: Tensor, detach_params: bool = False) -> Tensor:
        return self._forward(x, detach_params)


def valid_rows(x: Tensor, valid) -> Tensor:
    """Gather the rows of a (B, n, d) or (n, d) tensor where ``valid``."""
    valid = np.asarray(valid, dtype=bool)
    flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim == 3 else x
    return T.gather_rows(flat, np.flatnonzero(valid.ravel()))


def _log_prob(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, lo=LOG_FLOOR))


def _log_one_minus(p: Tensor) -> Tensor:
    return T.log(T.clamp(T.sub(Tensor(np.ones(p.shape)), p), lo=LOG_FLOOR))


def _check_pools(K: Tensor, Q: Tensor) -> None:
    if K.shape[0] == 0 or Q.shape[0] == 0:
        raise ContractError("key-query matching needs at least one key and one query row")


def ga_losses(K: Tensor, Q: Tensor, D: Discriminator, real_class: str = "query") -> tuple[Tensor, Tensor]:
    """``(d_loss, g_loss)`` for the adversarial key-query game."""
    _check_pools(K, Q)
    keys = K.detach()
    if real_class == "query":
        d_loss = T.sub(T.scale(T.mean(_log_prob(D(Q.detach()))), -1.0), T.mean(_log_one_minus(D(keys))))
        g_loss = T.scale(T.mean(_log_one_minus(D(Q, detach_params=True))), -1.0)
    else:
        d_loss = T.sub(T.scale(T.mean(_log_prob(D(keys))), -1.0), T.mean(_log_one_minus(D(Q.detach()))))
        g_loss = T.scale(T.mean(_log_prob(D(Q, detach_params=True))), -1.0)
    return d_loss, g_loss


@dataclass
class TransportPlan:
    forward: Tensor   # (n_q, n_k): weights over keys for each query
    backward: Tensor  # (n_k, n_q): weights over queries for each key
    cost: Tensor      # (n_q, n_k)
    value: Tensor     # scalar transport cost


def transport(K: Tensor, Q: Tensor, crit: Critic, detach_params: bool = False) -> TransportPlan:
    fq = crit(Q, detach_params)
    fk = crit(K, detach_params)
    scores = T.matmul(fq, T.transpose(fk))
    w_fwd = T.softmax_rows(scores)
    w_bwd = T.softmax_rows(T.transpose(scores))
    cos = T.matmul(T.l2_normalize_rows(fq), T.transpose(T.l2_normalize_rows(fk)))
    cost = T.sub(Tensor(np.ones(cos.shape)), cos)
    fwd_term = T.scale(T.sum_(T.mul(w_fwd, cost)), 1.0 / Q.shape[0])
    bwd_term = T.scale(T.sum_(T.mul(w_bwd, T.transpose(cost))), 1.0 / K.shape[0])
    value = T.scale(T.add(fwd_term, bwd_term), 0.5)
    return TransportPlan(forward=w_fwd, backward=w_bwd, cost=cost, value=value)


def ct_losses(K: Tensor, Q: Tensor, crit: Critic) -> tuple[Tensor, Tensor]:
    """``(critic_loss, gen_loss)``: the critic maximises the cost, the generator minimises it."""
    _check_pools(K, Q)
    keys = K.detach()
    critic_loss = T.scale(transport(keys, Q.detach(), crit).value, -1.0)
    gen_loss = transport(keys, Q, crit, detach_params=True).value
    return critic_loss, gen_loss


def combine(dskd_total: Tensor, kq_gen_loss: Tensor, mode: KqMode) -> Tensor:
    if mode.name == "none":
        raise ContractError("combine needs an active kq mode")
    return T.add(dskd_total, T.scale(kq_gen_loss, mode.weight))


def discriminator_accuracy(D: Discriminator, K: np.ndarray, Q: np.ndarray, real_class: str = "query") -> float:
    """Fraction of rows classified correctly at threshold 0.5."""
    pq = D(Tensor(Q), detach_params=True).data
    pk = D(Tensor(K), detach_params=True).data
    if real_class == "query":
        hits = (pq > 0.5).sum() + (pk <= 0.5).sum()
    else:
        hits = (pk > 0.5).sum() + (pq <= 0.5).sum()
    return float(hits) / (len(pq) + len(pk))
