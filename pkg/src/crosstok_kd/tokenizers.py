"""Byte-level tokenizers with per-token end offsets.

Two kinds share one :class:`Vocabulary` type:

* ``char``  -- one token per byte (256 byte pieces + 4 specials).
* ``merge`` -- the same byte alphabet plus pair merges learned by frequency;
  text is segmented greedily, longest matching piece first.

Offsets are byte offsets into ``text.encode("utf-8")``. For ASCII text (the
bundled corpus) they coincide with character offsets.

Vocabulary file grammar (UTF-8 text, ``\\n`` line ends)::

    crosstok-vocab 1
    KIND <char|merge>
    PIECES <V>
    <piece>                 # V lines, id order; specials as <bos> etc.
    MERGES <count>
    <left> <right>          # one learned merge per line, in learning order
    SPECIALS
    <name> <id>             # bos, eos, pad, unk

Pieces are written with printable ASCII kept as is, except space, backslash
and ``<``, which like every other byte are written as ``\\xHH``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import ContractError

SPECIAL_NAMES = ("bos", "eos", "pad", "unk")
NUM_BYTES = 256
_HEADER = "crosstok-vocab 1"


@dataclass(frozen=True)
class Tokenization:
    ids: list[int]
    end_offsets: list[int]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    kind: str
    id_to_piece: list[bytes]
    merges: list[tuple[bytes, bytes]] = field(default_factory=list)
    special_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.piece_to_id = {piece: i for i, piece in enumerate(self.id_to_piece)}
        if len(self.piece_to_id) != len(self.id_to_piece):
            raise ContractError("vocabulary pieces must be unique")
        specials = set(self.special_ids.values())
        self._matchable = {p: i for p, i in self.piece_to_id.items() if i not in specials}
        self._max_len = max(len(p) for p in self._matchable)

    def __len__(self) -> int:
        return len(self.id_to_piece)

    @property
    def bos(self) -> int:
        return self.special_ids["bos"]

    @property
    def eos(self) -> int:
        return self.special_ids["eos"]

    @property
    def pad(self) -> int:
        return self.special_ids["pad"]

    @property
    def unk(self) -> int:
        return self.special_ids["unk"]

    def is_special(self, token_id: int) -> bool:
        return token_id in self.special_ids.values()

    def save(self, path) -> None:
        Path(path).write_text(dumps_vocab(self), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        return loads_vocab(Path(path).read_text(encoding="utf-8"))


def _base_pieces() -> tuple[list[bytes], dict[str, int]]:
    pieces = [bytes([b]) for b in range(NUM_BYTES)]
    specials = {}
    for name in SPECIAL_NAMES:
        specials[name] = len(pieces)
        pieces.append(f"<{name}>".encode())
    return pieces, specials


def _pair_counts(seqs: list[list[bytes]], weights: list[int]) -> Counter:
    counts: Counter = Counter()
    for seq, w in zip(seqs, weights):
        for pair in zip(seq, seq[1:]):
            counts[pair] += w
    return counts


def _apply_merge(seq: list[bytes], pair: tuple[bytes, bytes]) -> list[bytes]:
    a, b = pair
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def build_vocab(corpus: list[str], kind: str = "char", num_merges: int = 0, seed: int = 0) -> Vocabulary:
    """Build a deterministic vocabulary.

    ``seed`` is accepted for interface symmetry; merge selection is fully
    determined by pair frequency with lexicographic tie-breaking.
    """
    if not corpus:
        raise ContractError("build_vocab needs a non-empty corpus")
    if kind not in ("char", "merge"):
        raise ContractError(f"unknown tokenizer kind {kind!r}")
    pieces, specials = _base_pieces()
    merges: list[tuple[bytes, bytes]] = []
    if kind == "merge":
        lines = Counter(corpus)
        seqs = [[bytes([b]) for b in line.encode("utf-8")] for line in lines]
        weights = list(lines.values())
        known = set(pieces)
        for _ in range(num_merges):
            counts = _pair_counts(seqs, weights)
            if not counts:
                break
            best = max(counts.values())
            pair = min(p for p, c in counts.items() if c == best)
            merges.append(pair)
            seqs = [_apply_merge(s, pair) for s in seqs]
            joined = pair[0] + pair[1]
            if joined not in known:
                known.add(joined)
                pieces.append(joined)
    return Vocabulary(kind=kind, id_to_piece=pieces, merges=merges, special_ids=specials)


def tokenize(v: Vocabulary, text: str) -> Tokenization:
    """Greedy longest-match segmentation with end offsets built on the fly."""
    raw = text.encode("utf-8")
    ids: list[int] = []
    ends: list[int] = []
    pos = 0
    n = len(raw)
    table = v._matchable
    while pos < n:
        for length in range(min(v._max_len, n - pos), 0, -1):
            tid = table.get(raw[pos : pos + length])
            if tid is not None:
                break
        else:
            tid, length = v.unk, 1
        ids.append(tid)
        pos += length
        ends.append(pos)
    return Tokenization(ids=ids, end_offsets=ends, text=text)


def decode_bytes(v: Vocabulary, ids) -> bytes:
    size = len(v)
    specials = set(v.special_ids.values())
    out = []
    for tid in ids:
        tid = int(tid)
        if tid < 0 or tid >= size:
            raise ContractError(f"token id {tid} outside vocabulary of size {size}")
        if tid not in specials:
            out.append(v.id_to_piece[tid])
    return b"".join(out)


def decode(v: Vocabulary, ids) -> str:
    return decode_bytes(v, ids).decode("utf-8", errors="replace")


# serialisation ---------------------------------------------------------------

_PLAIN = {b for b in range(0x21, 0x7F)} - {ord("\\"), ord("<")}


def escape_piece(piece: bytes) -> str:
    return "".join(chr(b) if b in _PLAIN else f"\\x{b:02x}" for b in piece)


def unescape_piece(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        if text[i] == "\\":
            if text[i + 1] != "x":
                raise ContractError(f"bad escape in piece {text!r}")
            out.append(int(text[i + 2 : i + 4], 16))
            i += 4
        else:
            out.append(ord(text[i]))
            i += 1
    return bytes(out)


def dumps_vocab(v: Vocabulary) -> str:
    specials = {i: name for name, i in v.special_ids.items()}
    lines = [_HEADER, f"KIND {v.kind}", f"PIECES {len(v)}"]
    for i, piece in enumerate(v.id_to_piece):
        lines.append(f"<{specials[i]}>" if i in specials else escape_piece(piece))
    lines.append(f"MERGES {len(v.merges)}")
    lines.extend(f"{escape_piece(a)} {escape_piece(b)}" for a, b in v.merges)
    lines.append("SPECIALS")
    lines.extend(f"{name} {i}" for name, i in v.special_ids.items())
    return "\n".join(lines) + "\n"


def loads_vocab(text: str) -> Vocabulary:
    lines = text.rstrip("\n").split("\n")
    if lines[0] != _HEADER:
        raise ContractError("not a crosstok vocabulary file")
    kind = lines[1].split(" ", 1)[1]
    count = int(lines[2].split(" ", 1)[1])
    raw_pieces = lines[3 : 3 + count]
    cursor = 3 + count
    n_merges = int(lines[cursor].split(" ", 1)[1])
    merges = []
    for line in lines[cursor + 1 : cursor + 1 + n_merges]:
        a, b = line.split(" ")
        merges.append((unescape_piece(a), unescape_piece(b)))
    cursor += 1 + n_merges
    if lines[cursor] != "SPECIALS":
        raise ContractError("vocabulary file is missing its SPECIALS section")
    specials = {}
    for line in lines[cursor + 1 :]:
        name, idx = line.split(" ")
        specials[name] = int(idx)
    pieces = [
        raw.encode() if raw.startswith("<") else unescape_piece(raw)
        for raw in raw_pieces
    ]
    return Vocabulary(kind=kind, id_to_piece=pieces, merges=merges, special_ids=specials)
