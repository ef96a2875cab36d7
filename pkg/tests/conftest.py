import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crosstok_kd.data import corpus_lines, generate_corpus  # noqa: E402
from crosstok_kd.harness import pretrain  # noqa: E402
from crosstok_kd.lm import ModelConfig, TinyLM  # noqa: E402
from crosstok_kd.tokenizers import build_vocab  # noqa: E402


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(0)


@pytest.fixture(scope="session")
def vocabs(corpus):
    lines = corpus_lines(corpus["train"])
    return build_vocab(lines, "merge", 150), build_vocab(lines, "char")


@pytest.fixture(scope="session")
def small_teacher(corpus, vocabs):
    """A briefly pre-trained teacher; good enough to give non-uniform targets."""
    tv, _ = vocabs
    model = TinyLM(ModelConfig(len(tv), 16, 1, 2, 96, seed=0))
    pretrain(model, corpus["train"], tv, steps=150, lr=3e-3)
    return model.freeze()


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one ``PASS``/``FAIL`` line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
