"""Minimal chunk alignment between two tokenizations of one text.

A chunk pairs a teacher token span ``[i, j)`` with a student token span
``[k, l)`` that cover exactly the same bytes, with no shorter such pair
inside it. The sweep walks both end-offset lists at once, always advancing
the side whose current token ends earlier.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError
from .tokenizers import Tokenization

Quad = tuple[int, int, int, int]


@dataclass(frozen=True)
class ChunkSet:
    quads: list[Quad]

    def __len__(self) -> int:
        return len(self.quads)

    def shifted(self, dt: int, ds: int) -> ChunkSet:
        return ChunkSet([(i + dt, j + dt, k + ds, l + ds) for i, j, k, l in self.quads])

    def __add__(self, other: ChunkSet) -> ChunkSet:
        return ChunkSet(self.quads + other.quads)


@dataclass(frozen=True)
class AlignmentMatrix:
    m_t2s: np.ndarray  # (n_s, n_t)
    m_s2t: np.ndarray  # (n_t, n_s)


def align_chunks(t: Tokenization, s: Tokenization) -> ChunkSet:
    if t.text != s.text:
        raise ContractError("align_chunks: tokenizations are of different texts")
    te, se = t.end_offsets, s.end_offsets
    quads: list[Quad] = []
    i = k = 0
    start_t = start_s = 0
    while i < len(te) and k < len(se):
        if te[i] == se[k]:
            i += 1
            k += 1
            quads.append((start_t, i, start_s, k))
            start_t, start_s = i, k
        elif te[i] < se[k]:
            i += 1
        else:
            k += 1
    if i != len(te) or k != len(se):
        raise ContractError("align_chunks: offsets do not end at the same position")
    return ChunkSet(quads)


def build_matrices(c: ChunkSet, n_t: int, n_s: int) -> AlignmentMatrix:
    m = np.zeros((n_s, n_t))
    for i, j, k, l in c.quads:
        if not (0 <= i < j <= n_t and 0 <= k < l <= n_s):
            raise ContractError(f"quad {(i, j, k, l)} out of range for n_t={n_t}, n_s={n_s}")
        m[k:l, i:j] = 1.0
    return AlignmentMatrix(m_t2s=m, m_s2t=m.T.copy())


def format_quads(c: ChunkSet, t: Tokenization, s: Tokenization) -> list[str]:
    """Tab-separated ``i j k l teacher_span student_span`` lines."""
    raw = t.text.encode("utf-8")
    t_starts = [0] + t.end_offsets
    s_starts = [0] + s.end_offsets
    lines = []
    for i, j, k, l in c.quads:
        t_span = raw[t_starts[i] : t.end_offsets[j - 1]]
        s_span = raw[s_starts[k] : s.end_offsets[l - 1]]
        lines.append(f"{i}\t{j}\t{k}\t{l}\t{_show(t_span)}\t{_show(s_span)}")
    return lines


def _show(span: bytes) -> str:
    return span.decode("utf-8", errors="replace").encode("unicode_escape").decode("ascii")
