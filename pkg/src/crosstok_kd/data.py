"""Instruction records, the bundled synthetic corpus, and batch assembly.

Records are JSON lines with ``instruction``, ``input`` and ``output`` keys.
The model sees ``instruction + "\\n" + input + "\\n"`` as its prompt and the
output as its response. Prompt and response are tokenized separately, so
their boundary is a token boundary under every tokenizer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .align import ChunkSet, align_chunks, build_matrices
from .tensor import ContractError
from .tokenizers import Vocabulary, tokenize

SEP = "\n"
SPLITS = ("train", "val", "test_id", "test_ood")


class DataError(ValueError):
    """A dataset file is malformed."""


@dataclass(frozen=True)
class DatasetRecord:
    instruction: str
    input: str
    output: str

    def __post_init__(self):
        if not self.instruction:
            raise DataError("instruction must be non-empty")
        if not self.output:
            raise DataError("output must be non-empty")

    @property
    def prompt(self) -> str:
        return self.instruction + SEP + self.input + SEP


def load_jsonl(path) -> list[DatasetRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            missing = [k for k in ("instruction", "input", "output") if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            try:
                records.append(DatasetRecord(str(obj["instruction"]), str(obj["input"]), str(obj["output"])))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def write_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


# synthetic corpus --------------------------------------------------------------

COLORS = {
    "sky": "blue", "grass": "green", "banana": "yellow", "snow": "white",
    "coal": "black", "tomato": "red", "plum": "purple", "lemon": "yellow",
    "cherry": "red", "leaf": "green", "cloud": "white", "carrot": "orange",
}
HOMES = {
    "fish": "sea", "camel": "desert", "bear": "forest", "owl": "forest",
    "whale": "sea", "frog": "pond", "goat": "hills", "duck": "pond",
    "crab": "beach", "monkey": "jungle", "lion": "plains", "seal": "beach",
}
OPPOSITES = {
    "hot": "cold", "big": "small", "fast": "slow", "tall": "short",
    "happy": "sad", "light": "dark", "old": "new", "wet": "dry",
    "early": "late", "loud": "quiet", "hard": "soft", "rich": "poor",
}


def _color(rng, ood):
    obj = rng.choice(sorted(COLORS))
    instr = f"tell me the color of the {obj} ." if ood else f"what color is the {obj} ?"
    return instr, "", f"the {obj} is {COLORS[obj]} ."


def _home(rng, ood):
    animal = rng.choice(sorted(HOMES))
    instr = f"which place is home to the {animal} ?" if ood else f"where does the {animal} live ?"
    return instr, "", f"the {animal} lives in the {HOMES[animal]} ."


def _opposite(rng, ood):
    word = rng.choice(sorted(OPPOSITES))
    if ood:
        return f"what is the opposite of {word} ?", "", f"the opposite of {word} is {OPPOSITES[word]} ."
    return "give the opposite word .", word, f"the opposite of {word} is {OPPOSITES[word]} ."


def _add(rng, ood):
    a, b = (int(x) for x in rng.integers(1, 10, size=2))
    if ood:
        return f"what is {a} plus {b} ?", "", f"{a} plus {b} is {a + b} ."
    return "add the two numbers .", f"{a} {b}", f"{a} plus {b} is {a + b} ."


def _resident(rng, ood):
    habitat = rng.choice(sorted(set(HOMES.values())))
    animal = rng.choice(sorted(a for a, h in HOMES.items() if h == habitat))
    instr = f"which animal is found in the {habitat} ?" if ood else f"name an animal of the {habitat} ."
    return instr, "", f"the {animal} lives in the {habitat} ."


TEMPLATES = (_color, _home, _opposite, _add, _resident)


def generate_corpus(seed: int = 0, sizes: dict[str, int] | None = None) -> dict[str, list[DatasetRecord]]:
    """Templated instruction data; ``test_ood`` uses phrasings unseen elsewhere."""
    sizes = {"train": 2000, "val": 200, "test_id": 60, "test_ood": 60, **(sizes or {})}
    rng = np.random.default_rng(seed)
    out = {}
    for split in SPLITS:
        ood = split == "test_ood"
        records = []
        for _ in range(sizes[split]):
            template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            records.append(DatasetRecord(*template(rng, ood)))
        out[split] = records
    return out


def corpus_lines(records) -> list[str]:
    return [text for rec in records for text in (rec.prompt, rec.output)]


# encoding ----------------------------------------------------------------------


@dataclass
class Encoded:
    ids: np.ndarray       # model input: bos + prompt + response
    gold: np.ndarray      # next-token targets: prompt + response + eos
    response: np.ndarray  # True where gold is a response token or eos
    n_prompt: int


@dataclass
class PairExample:
    record: DatasetRecord
    teacher: Encoded
    student: Encoded
    chunks: ChunkSet      # over input positions, bos included

    def matrix(self) -> np.ndarray:
        return build_matrices(self.chunks, len(self.teacher.ids), len(self.student.ids)).m_t2s


def _encode(v: Vocabulary, prompt_ids: list[int], response_ids: list[int]) -> Encoded:
    full = [v.bos] + prompt_ids + response_ids + [v.eos]
    n = len(full) - 1
    response = np.arange(n) >= len(prompt_ids)
    return Encoded(np.array(full[:-1]), np.array(full[1:]), response, len(prompt_ids))


def encode_record(v: Vocabulary, rec: DatasetRecord) -> Encoded:
    return _encode(v, tokenize(v, rec.prompt).ids, tokenize(v, rec.output).ids)


def encode_pair(rec: DatasetRecord, teacher_vocab: Vocabulary, student_vocab: Vocabulary) -> PairExample:
    tp, tr = tokenize(teacher_vocab, rec.prompt), tokenize(teacher_vocab, rec.output)
    sp, sr = tokenize(student_vocab, rec.prompt), tokenize(student_vocab, rec.output)
    chunks = ChunkSet([(0, 1, 0, 1)])
    chunks = chunks + align_chunks(tp, sp).shifted(1, 1)
    chunks = chunks + align_chunks(tr, sr).shifted(1 + len(tp), 1 + len(sp))
    return PairExample(
        record=rec,
        teacher=_encode(teacher_vocab, tp.ids, tr.ids),
        student=_encode(student_vocab, sp.ids, sr.ids),
        chunks=chunks,
    )


@dataclass
class Side:
    ids: np.ndarray
    gold: np.ndarray
    valid: np.ndarray
    response: np.ndarray


@dataclass
class Batch:
    teacher: Side
    student: Side
    m_t2s: np.ndarray  # (B, n_s, n_t)

    @property
    def size(self) -> int:
        return self.student.ids.shape[0]


def pad_side(encs: list[Encoded], pad: int, max_seq: int | None) -> Side:
    n = max(len(e.ids) for e in encs)
    if max_seq is not None and n > max_seq:
        raise ContractError(f"example of length {n} exceeds max_seq={max_seq}")
    b = len(encs)
    ids = np.full((b, n), pad, dtype=np.int64)
    gold = np.full((b, n), pad, dtype=np.int64)
    valid = np.zeros((b, n), dtype=bool)
    resp = np.zeros((b, n), dtype=bool)
    for i, e in enumerate(encs):
        m = len(e.ids)
        ids[i, :m], gold[i, :m], valid[i, :m], resp[i, :m] = e.ids, e.gold, True, e.response
    return Side(ids, gold, valid, resp)


def collate(examples: list[PairExample], teacher_pad: int, student_pad: int, max_seq: tuple[int, int] | None = None) -> Batch:
    t_max, s_max = max_seq if max_seq else (None, None)
    teacher = pad_side([e.teacher for e in examples], teacher_pad, t_max)
    student = pad_side([e.student for e in examples], student_pad, s_max)
    m = np.zeros((len(examples), student.ids.shape[1], teacher.ids.shape[1]))
    for i, e in enumerate(examples):
        mt = e.matrix()
        m[i, : mt.shape[0], : mt.shape[1]] = mt
    return Batch(teacher=teacher, student=student, m_t2s=m)
