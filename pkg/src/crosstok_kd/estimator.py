"""A scikit-learn style front end for cross-tokenizer distillation.

``X`` is a sequence of prompts: :class:`DatasetRecord` objects, ``(instruction,
input)`` pairs, or bare instruction strings (empty input). ``y`` holds the
reference responses and may be omitted when ``X`` already carries them.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import harness as H
from .config import Config
from .data import DatasetRecord, corpus_lines
from .divergences import DivergenceKind
from .tokenizers import build_vocab


def as_records(X, y=None, need_outputs: bool = True) -> list[DatasetRecord]:
    """Normalise the accepted ``X``/``y`` forms into records.

    With ``need_outputs=False`` a missing ``y`` is allowed and a placeholder
    response is used (prediction only looks at prompts).
    """
    if isinstance(X, (str, bytes)) or not isinstance(X, (Sequence, np.ndarray)):
        raise TypeError("X must be a sequence of prompts, not a single value")
    items = list(X)
    if not items:
        raise ValueError("X is empty")
    if y is not None:
        y = list(y)
        if len(y) != len(items):
            raise ValueError(f"X has {len(items)} prompts but y has {len(y)} responses")
    records = []
    for i, item in enumerate(items):
        if isinstance(item, DatasetRecord):
            instruction, inp, out = item.instruction, item.input, item.output
        else:
            instruction, inp = (item, "") if isinstance(item, str) else tuple(item)
            out = None
        if y is not None:
            out = y[i]
        if out is None:
            if need_outputs:
                raise ValueError("y is required unless X holds DatasetRecord objects")
            out = "-"
        records.append(DatasetRecord(str(instruction), str(inp), str(out)))
    return records


class CrossTokenizerDistiller(BaseEstimator):
    """Pre-train a merge-vocabulary teacher, then distil it into a byte-level student.

    Pass ``teacher`` (a frozen :class:`~crosstok_kd.lm.TinyLM`) together with
    its ``teacher_vocab`` to skip teacher pre-training.
    """

    def __init__(
        self,
        mode: str = "dskd-cma",
        divergence: str = "kl",
        lr: float = 1e-3,
        steps: int = 500,
        batch_size: int = 8,
        seed: int = 1,
        swap_kd_args: bool = False,
        kq_weight: float = 1.0,
        teacher_merges: int = 150,
        teacher_hidden_dim: int = 32,
        teacher_pretrain_steps: int = 1500,
        student_hidden_dim: int = 16,
        max_new: int = 40,
        teacher=None,
        teacher_vocab=None,
    ):
        self.mode = mode
        self.divergence = divergence
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed
        self.swap_kd_args = swap_kd_args
        self.kq_weight = kq_weight
        self.teacher_merges = teacher_merges
        self.teacher_hidden_dim = teacher_hidden_dim
        self.teacher_pretrain_steps = teacher_pretrain_steps
        self.student_hidden_dim = student_hidden_dim
        self.max_new = max_new
        self.teacher = teacher
        self.teacher_vocab = teacher_vocab

    def _config(self) -> Config:
        return Config({
            "model.teacher.hidden_dim": self.teacher_hidden_dim,
            "model.teacher.num_merges": self.teacher_merges,
            "model.teacher.pretrain_steps": self.teacher_pretrain_steps,
            "model.student.hidden_dim": self.student_hidden_dim,
        })

    def fit(self, X, y=None, X_val=None, y_val=None):
        records = as_records(X, y)
        val = as_records(X_val, y_val) if X_val is not None else None
        cfg = self._config()
        lines = corpus_lines(records)
        if (self.teacher is None) != (self.teacher_vocab is None):
            raise ValueError("teacher and teacher_vocab must be given together")
        if self.teacher is None:
            self.teacher_vocab_ = build_vocab(lines, "merge", self.teacher_merges)
            self.teacher_ = H.build_teacher(cfg, self.teacher_vocab_, records, val)
        else:
            self.teacher_vocab_, self.teacher_ = self.teacher_vocab, self.teacher
        self.student_vocab_ = build_vocab(lines, "char")
        student = H.build_student(cfg, self.student_vocab_, self.seed)
        run = H.RunConfig(
            mode=self.mode,
            divergence=DivergenceKind(self.divergence),
            lr=self.lr,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed,
            swap_kd_args=self.swap_kd_args,
            kq_weight=self.kq_weight,
        )
        examples = H.encode_all(records, self.teacher_vocab_, self.student_vocab_)
        result = H.train(run, examples, self.teacher_, student, self.teacher_vocab_, self.student_vocab_)
        self.student_ = result.student
        self.projectors_ = result.projectors
        self.log_ = result.log
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "student_")
        prompts = [r.prompt for r in as_records(X, need_outputs=False)]
        return np.array(H.generate(self.student_, self.student_vocab_, prompts, self.max_new), dtype=object)

    def score(self, X, y=None) -> float:
        """Mean ROUGE-L F1 of greedy generations against the references."""
        check_is_fitted(self, "student_")
        records = as_records(X, y)
        return H.evaluate(self.student_, self.student_vocab_, {"eval": records}, self.max_new).mean("eval")
