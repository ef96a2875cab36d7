"""Tiny pre-LN decoder-only language models.

Checkpoint layout (all little-endian)::

    b"XTKDLM01"
    int64 x 6   vocab_size, hidden_dim, num_layers, num_heads, max_seq, seed
    uint8       frozen flag
    uint32      number of parameters
    per parameter, in declaration order:
        uint8 ndim, uint32 x ndim shape, float64 x prod(shape) data
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

CKPT_MAGIC = b"XTKDLM01"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    num_layers: int = 2
    num_heads: int = 2
    max_seq: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "max_seq"):
            if getattr(self, name) <= 0:
                raise ContractError(f"ModelConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ContractError("hidden_dim must be divisible by num_heads")


@dataclass
class ForwardOutput:
    hidden: Tensor
    input_embeds: Tensor
    target_embeds: Tensor
    logits: Tensor


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.hidden_dim, cfg.vocab_size
    shapes = [("wte", (v, d)), ("wpe", (cfg.max_seq, d))]
    for i in range(cfg.num_layers):
        shapes += [
            (f"h{i}.ln1.g", (d,)),
            (f"h{i}.ln1.b", (d,)),
            (f"h{i}.attn.w", (d, 3 * d)),
            (f"h{i}.attn.b", (3 * d,)),
            (f"h{i}.proj.w", (d, d)),
            (f"h{i}.proj.b", (d,)),
            (f"h{i}.ln2.g", (d,)),
            (f"h{i}.ln2.b", (d,)),
            (f"h{i}.fc.w", (d, 4 * d)),
            (f"h{i}.fc.b", (4 * d,)),
            (f"h{i}.out.w", (4 * d, d)),
            (f"h{i}.out.b", (d,)),
        ]
    shapes += [("lnf.g", (d,)), ("lnf.b", (d,)), ("head", (d, v))]
    return shapes


class TinyLM:
    """A small causal transformer with learned absolute positions."""

    def __init__(self, config: ModelConfig, frozen: bool = False):
        self.config = config
        rng = np.random.default_rng(config.seed)
        resid_std = 0.02 / np.sqrt(2 * config.num_layers)
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(config):
            if name.endswith(".g"):
                value = np.ones(shape)
            elif name.endswith(".b"):
                value = np.zeros(shape)
            elif name.endswith(("proj.w", "out.w")):
                value = rng.normal(0.0, resid_std, shape)
            else:
                value = rng.normal(0.0, 0.02, shape)
            self.params[name] = Tensor(value, requires_grad=True)
        self.frozen = False
        if frozen:
            self.freeze()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> TinyLM:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params.values():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    @property
    def head(self) -> Tensor:
        return self.params["head"]

    @property
    def token_embedding(self) -> Tensor:
        return self.params["wte"]

    def forward(self, ids, gold=None, pad_mask=None, grad: bool = True) -> ForwardOutput:
        """Run the model on ``ids`` of shape (n,) or (B, n).

        ``gold`` holds the next-token targets (same shape); ``pad_mask`` marks
        real (non-padding) positions. Outputs keep the batch axis only when
        the input had one. With ``grad=False`` no graph is recorded.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        b, n = ids.shape
        if n > self.config.max_seq:
            raise ContractError(f"sequence of length {n} exceeds max_seq={self.config.max_seq}")
        if gold is None:
            gold = np.full_like(ids, 0)
        gold = np.asarray(gold, dtype=np.int64).reshape(b, n)
        valid = np.ones((b, n), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(b, n)
        p = self.params if grad else {k: v.detach() for k, v in self.params.items()}
        cfg = self.config
        d = cfg.hidden_dim
        dh = d // cfg.num_heads

        input_embeds = T.gather_rows(p["wte"], ids)
        target_embeds = T.mul(T.gather_rows(p["wte"], gold), Tensor(np.repeat(valid[..., None], d, axis=-1)))
        positions = np.broadcast_to(np.arange(n), (b, n))
        x = T.add(input_embeds, T.gather_rows(p["wpe"], positions))

        causal = np.tril(np.ones((n, n), dtype=bool))
        att_mask = causal[None] & valid[:, None, :]
        for i in range(cfg.num_layers):
            h = T.layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            qkv = T.affine(h, p[f"h{i}.attn.w"], p[f"h{i}.attn.b"])
            heads = []
            for j in range(cfg.num_heads):
                q = T.slice_last(qkv, j * dh, (j + 1) * dh)
                k = T.slice_last(qkv, d + j * dh, d + (j + 1) * dh)
                v = T.slice_last(qkv, 2 * d + j * dh, 2 * d + (j + 1) * dh)
                scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
                heads.append(T.matmul(T.softmax_rows(scores, att_mask), v))
            y = heads[0] if len(heads) == 1 else T.concat_last(heads)
            x = T.add(x, T.affine(y, p[f"h{i}.proj.w"], p[f"h{i}.proj.b"]))
            h = T.layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            h = T.gelu(T.affine(h, p[f"h{i}.fc.w"], p[f"h{i}.fc.b"]))
            x = T.add(x, T.affine(h, p[f"h{i}.out.w"], p[f"h{i}.out.b"]))
        hidden = T.layer_norm(x, p["lnf.g"], p["lnf.b"])
        logits = T.matmul(hidden, p["head"])
        out = ForwardOutput(hidden=hidden, input_embeds=input_embeds, target_embeds=target_embeds, logits=logits)
        if single:
            out = ForwardOutput(*(T.reshape(t, t.shape[1:]) for t in _tensors(out)))
        return out


def _tensors(out: ForwardOutput) -> tuple[Tensor, ...]:
    return (out.hidden, out.input_embeds, out.target_embeds, out.logits)


def ce_loss(logits: Tensor, gold, mask) -> Tensor:
    """Mean negative log-likelihood of ``gold`` over positions where ``mask``."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ContractError("ce_loss: response mask is empty")
    picked = T.pick_last(T.log_softmax_rows(logits), gold)
    return T.scale(T.sum_(T.mul(picked, Tensor(mask))), -1.0 / count)


def greedy_decode(m: TinyLM, prompt_ids, max_new: int, eos: int | None = None) -> list[int]:
    """Append the argmax token until ``eos`` or ``max_new`` tokens; lowest id wins ties."""
    ids = list(prompt_ids)
    if len(ids) > m.config.max_seq:
        raise ContractError("prompt longer than max_seq")
    generated: list[int] = []
    for _ in range(max_new):
        if len(ids) >= m.config.max_seq:
            break
        logits = m.forward(ids, grad=False).logits.data
        nxt = int(np.argmax(logits[-1]))
        if nxt == eos:
            break
        generated.append(nxt)
        ids.append(nxt)
    return generated


def greedy_decode_batch(m: TinyLM, prompts: list[list[int]], max_new: int, eos: int, pad: int) -> list[list[int]]:
    """:func:`greedy_decode` for many prompts at once via right padding."""
    seqs = [list(p) for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    live = [len(p) < m.config.max_seq for p in seqs]
    for _ in range(max_new):
        active = [i for i, ok in enumerate(live) if ok]
        if not active:
            break
        n = max(len(seqs[i]) for i in active)
        ids = np.full((len(active), n), pad, dtype=np.int64)
        valid = np.zeros((len(active), n), dtype=bool)
        for r, i in enumerate(active):
            ids[r, : len(seqs[i])] = seqs[i]
            valid[r, : len(seqs[i])] = True
        logits = m.forward(ids, pad_mask=valid, grad=False).logits.data
        for r, i in enumerate(active):
            nxt = int(np.argmax(logits[r, len(seqs[i]) - 1]))
            if nxt == eos:
                live[i] = False
                continue
            out[i].append(nxt)
            seqs[i].append(nxt)
            if len(seqs[i]) >= m.config.max_seq:
                live[i] = False
    return out


# checkpoints -----------------------------------------------------------------


def write_arrays(fh: BinaryIO, arrays: list[np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_arrays(fh: BinaryIO) -> list[np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
    return out


def save_checkpoint(m: TinyLM, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<6q", *astuple(m.config)))
        fh.write(struct.pack("<B", int(m.frozen)))
        write_arrays(fh, [p.data for p in m.params.values()])


def load_checkpoint(path) -> TinyLM:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ContractError(f"{path}: not a model checkpoint")
        cfg = ModelConfig(*struct.unpack("<6q", fh.read(48)))
        (frozen,) = struct.unpack("<B", fh.read(1))
        arrays = read_arrays(fh)
    m = TinyLM(cfg)
    names = list(m.params)
    if len(arrays) != len(names):
        raise ContractError(f"{path}: expected {len(names)} parameters, found {len(arrays)}")
    for name, arr in zip(names, arrays):
        if arr.shape != m.params[name].shape:
            raise ContractError(f"{path}: parameter {name} has shape {arr.shape}")
        m.params[name].data = arr
    if frozen:
        m.freeze()
    return m


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
