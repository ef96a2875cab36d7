"""Cross-model attention between a student and a frozen teacher.

Shapes below use ``n_s``/``n_t`` for sequence lengths and ``d_s``/``d_t`` for
hidden sizes; every function also accepts a leading batch axis.

* queries  ``Q = P_Q([e_in^s, e_tgt^s])``                      (n_s, 2 d_t)
* keys     ``K = std_norm([e_in^t, e_tgt^t])``                 (n_t, 2 d_t)
* weights  ``A_t2s = softmax(Q K^T / sqrt(2 d_t))``            (n_s, n_t)
* values   ``V_s2t = P_s2t(h^s)``, ``V_t2s = P_t2s(std_norm(h^t) + std_norm(e_tgt^t))``
* states   ``h_t2s = A_t2s V_t2s``, ``h_s2t = A_s2t V_s2t``

Three alignment modes pick the weights: ``cma`` (attention as above), ``clp``
(uniform weight over the tokens of each aligned chunk) and ``cla`` (attention
restricted to aligned chunks). Restriction is done by masking logits to -inf.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .divergences import DivergenceKind, divergence
from .lm import ForwardOutput, ce_loss, read_arrays, write_arrays
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

MODES = ("cma", "clp", "cla")
PROJ_MAGIC = b"XTKDPJ01"


class Projectors:
    """Trainable affine maps ``P_Q``, ``P_s2t`` and ``P_t2s``."""

    def __init__(self, d_s: int, d_t: int, seed: int = 0):
        self.d_s, self.d_t = d_s, d_t
        rng = np.random.default_rng(seed)
        shapes = {"q": (2 * d_s, 2 * d_t), "s2t": (d_s, d_t), "t2s": (d_t, d_s)}
        self.params: dict[str, Tensor] = {}
        for name, (fan_in, fan_out) in shapes.items():
            self.params[f"{name}.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def apply(self, name: str, x: Tensor) -> Tensor:
        return T.affine(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(PROJ_MAGIC)
            fh.write(struct.pack("<2q", self.d_s, self.d_t))
            write_arrays(fh, [p.data for p in self.params.values()])

    @classmethod
    def load(cls, path) -> Projectors:
        with open(path, "rb") as fh:
            if fh.read(len(PROJ_MAGIC)) != PROJ_MAGIC:
                raise ContractError(f"{path}: not a projector file")
            d_s, d_t = struct.unpack("<2q", fh.read(16))
            arrays = read_arrays(fh)
        proj = cls(d_s, d_t)
        for p, arr in zip(proj.params.values(), arrays):
            p.data = arr
        return proj


@dataclass
class CmaState:
    Q: Tensor
    K: Tensor
    A_t2s: Tensor
    A_s2t: Tensor
    V_s2t: Tensor
    V_t2s: Tensor
    h_t2s: Tensor
    h_s2t: Tensor
    q_t2s: Tensor | None = None
    q_s2t: Tensor | None = None


@dataclass
class LossReport:
    """Scalar loss parts of one step.

    ``kq`` is the weighted key-query term, so ``total`` is always
    ``0.5*ce_s + 0.5*(kd_s2t + kd_t2s + ce_t) + kq`` except in plain CE
    training where it is ``ce_s``.
    """

    ce_s: float
    kd_s2t: float = 0.0
    kd_t2s: float = 0.0
    ce_t: float = 0.0
    kq: float = 0.0
    total: float = 0.0
    ce_only: bool = False

    def expected_total(self) -> float:
        if self.ce_only:
            return self.ce_s
        return 0.5 * self.ce_s + 0.5 * ((self.kd_s2t + self.kd_t2s) + self.ce_t) + self.kq

    def as_row(self) -> tuple[float, ...]:
        return (self.ce_s, self.kd_s2t, self.kd_t2s, self.ce_t, self.kq, self.total)


@dataclass
class DualSpaceLoss:
    ce_s: Tensor
    kd_s2t: Tensor
    kd_t2s: Tensor
    ce_t: Tensor
    total: Tensor

    def report(self) -> LossReport:
        return LossReport(
            ce_s=self.ce_s.item(),
            kd_s2t=self.kd_s2t.item(),
            kd_t2s=self.kd_t2s.item(),
            ce_t=self.ce_t.item(),
            total=self.total.item(),
        )


def _check_dims(s_out: ForwardOutput, t_out: ForwardOutput, proj: Projectors) -> None:
    if s_out.hidden.shape[-1] != proj.d_s or t_out.hidden.shape[-1] != proj.d_t:
        raise ContractError(
            f"projectors expect d_s={proj.d_s}, d_t={proj.d_t}; got hidden sizes "
            f"{s_out.hidden.shape[-1]} and {t_out.hidden.shape[-1]}"
        )


def build_qk(s_out: ForwardOutput, t_out: ForwardOutput, proj: Projectors) -> tuple[Tensor, Tensor]:
    """Queries from student embeddings, keys from normalised teacher embeddings.

    Gradients through ``Q`` reach both ``P_Q`` and the student embedding table.
    """
    _check_dims(s_out, t_out, proj)
    q_in = T.concat_last([s_out.input_embeds, s_out.target_embeds])
    Q = proj.apply("q", q_in)
    K = T.std_normalize_rows(T.concat_last([t_out.input_embeds, t_out.target_embeds]).detach())
    return Q, K


def pair_mask(s_valid, t_valid) -> np.ndarray:
    """(.., n_s, n_t) mask of real student rows against real teacher columns."""
    s_valid = np.asarray(s_valid, dtype=bool)
    t_valid = np.asarray(t_valid, dtype=bool)
    return s_valid[..., :, None] & t_valid[..., None, :]


def admissible(m_t2s, base: np.ndarray) -> np.ndarray:
    """Restrict ``base`` to aligned chunks; real rows left empty fall back to ``base``."""
    allowed = base & (np.asarray(m_t2s) > 0)
    empty = base.any(axis=-1) & ~allowed.any(axis=-1)
    if empty.any():
        log.warning("%d row(s) have no aligned chunk; falling back to unrestricted weights", int(empty.sum()))
        allowed = np.where(empty[..., None], base, allowed)
    return allowed


def _both_ways(mask_t2s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return mask_t2s, np.swapaxes(mask_t2s, -1, -2)


def attention(Q: Tensor, K: Tensor, mode: str = "cma", M=None, s_valid=None, t_valid=None) -> tuple[Tensor, Tensor]:
    """Return ``(A_t2s, A_s2t)``. ``M`` is the student-by-teacher chunk matrix."""
    if mode not in MODES:
        raise ContractError(f"unknown alignment mode {mode!r}")
    if Q.shape[-1] != K.shape[-1]:
        raise ContractError(f"query width {Q.shape[-1]} differs from key width {K.shape[-1]}")
    n_s, n_t = Q.shape[-2], K.shape[-2]
    lead = Q.shape[:-2]
    s_valid = np.ones(lead + (n_s,), dtype=bool) if s_valid is None else s_valid
    t_valid = np.ones(lead + (n_t,), dtype=bool) if t_valid is None else t_valid
    base = pair_mask(s_valid, t_valid)
    if mode == "cla":
        if M is None:
            raise ContractError("cla mode needs an alignment matrix")
        base = admissible(M, base)
    logits = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / np.sqrt(Q.shape[-1]))
    mask_t2s, mask_s2t = _both_ways(base)
    return T.softmax_rows(logits, mask_t2s), T.softmax_rows(T.transpose(logits), mask_s2t)


def chunk_weights(M, s_valid=None, t_valid=None) -> tuple[Tensor, Tensor]:
    """Uniform weights over each row's aligned tokens, as constant tensors."""
    M = np.asarray(M, dtype=np.float64)
    lead = M.shape[:-2]
    n_s, n_t = M.shape[-2:]
    s_valid = np.ones(lead + (n_s,), dtype=bool) if s_valid is None else s_valid
    t_valid = np.ones(lead + (n_t,), dtype=bool) if t_valid is None else t_valid
    mask_t2s, mask_s2t = _both_ways(admissible(M, pair_mask(s_valid, t_valid)))
    zeros = Tensor(np.zeros(M.shape))
    return T.softmax_rows(zeros, mask_t2s), T.softmax_rows(T.transpose(zeros), mask_s2t)


def project_values(s_out: ForwardOutput, t_out: ForwardOutput, proj: Projectors) -> tuple[Tensor, Tensor]:
    _check_dims(s_out, t_out, proj)
    v_s2t = proj.apply("s2t", s_out.hidden)
    teacher_in = T.add(
        T.std_normalize_rows(t_out.hidden.detach()),
        T.std_normalize_rows(t_out.target_embeds.detach()),
    )
    v_t2s = proj.apply("t2s", teacher_in)
    return v_s2t, v_t2s


def cross_states(A_t2s, A_s2t, V_t2s, V_s2t, mode: str = "cma", M=None, s_valid=None, t_valid=None):
    """``(h_t2s, h_s2t)``; in ``clp`` mode the chunk weights replace ``A``."""
    if mode == "clp":
        if M is None:
            raise ContractError("clp mode needs an alignment matrix")
        A_t2s, A_s2t = chunk_weights(M, s_valid, t_valid)
    return T.matmul(A_t2s, V_t2s), T.matmul(A_s2t, V_s2t)


def run_cma(s_out, t_out, proj: Projectors, mode: str = "cma", M=None, s_valid=None, t_valid=None) -> CmaState:
    Q, K = build_qk(s_out, t_out, proj)
    if mode == "clp":
        A_t2s, A_s2t = chunk_weights(M, s_valid, t_valid)
    else:
        A_t2s, A_s2t = attention(Q, K, mode, M, s_valid, t_valid)
    V_s2t, V_t2s = project_values(s_out, t_out, proj)
    h_t2s, h_s2t = cross_states(A_t2s, A_s2t, V_t2s, V_s2t)
    return CmaState(Q, K, A_t2s, A_s2t, V_s2t, V_t2s, h_t2s, h_s2t)


def dual_space_losses(
    state: CmaState,
    s_out: ForwardOutput,
    t_out: ForwardOutput,
    student_head: Tensor,
    teacher_head: Tensor,
    kind: DivergenceKind,
    mask_s,
    mask_t,
    gold_s,
    swap_args: bool = False,
) -> DualSpaceLoss:
    """Losses in both output spaces.

    ``kd_t2s = f(p_s || q_t2s)`` over student response rows and
    ``kd_s2t = f(p_t || q_s2t)`` over teacher response rows (``swap_args``
    flips the arguments). ``ce_t`` scores the teacher-derived student-space
    distribution ``q_t2s`` against the student's gold tokens.
    """
    logits_t2s = T.matmul(state.h_t2s, student_head)
    logits_s2t = T.matmul(state.h_s2t, teacher_head.detach())
    state.q_t2s = T.softmax_rows(logits_t2s)
    state.q_s2t = T.softmax_rows(logits_s2t)
    p_s = T.softmax_rows(s_out.logits)
    p_t = T.softmax_rows(t_out.logits.detach())

    def f(p, q, mask):
        return divergence(kind, q, p, mask) if swap_args else divergence(kind, p, q, mask)

    kd_t2s = f(p_s, state.q_t2s, mask_s)
    kd_s2t = f(p_t, state.q_s2t, mask_t)
    ce_s = ce_loss(s_out.logits, gold_s, mask_s)
    ce_t = ce_loss(logits_t2s, gold_s, mask_s)
    total = T.add(T.scale(ce_s, 0.5), T.scale(T.add(T.add(kd_s2t, kd_t2s), ce_t), 0.5))
    return DualSpaceLoss(ce_s=ce_s, kd_s2t=kd_s2t, kd_t2s=kd_t2s, ce_t=ce_t, total=total)
