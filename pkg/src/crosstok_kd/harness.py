"""Training, evaluation and run reporting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cma import LossReport, Projectors, dual_space_losses, run_cma
from .config import Config
from .data import Batch, DatasetRecord, PairExample, collate, encode_pair, encode_record, pad_side
from .divergences import DivergenceKind, divergence
from .kq import Critic, Discriminator, KqMode, combine, ct_losses, ga_losses, valid_rows
from .lm import ModelConfig, TinyLM, ce_loss, greedy_decode_batch
from .metrics import rouge_l
from .optim import Adam
from .tensor import ContractError
from .tokenizers import Vocabulary, decode

log = logging.getLogger(__name__)

MODES = ("sft", "dskd-same-tok", "dskd-cma", "dskd-clp", "dskd-cla", "dskd-cma-ga", "dskd-cma-ct")
ALIGNMENT = {"dskd-cma": "cma", "dskd-clp": "clp", "dskd-cla": "cla", "dskd-cma-ga": "cma", "dskd-cma-ct": "cma"}
KQ_OF_MODE = {"dskd-cma-ga": "ga", "dskd-cma-ct": "ct"}
LOG_HEADER = "step\tce_s\tkd_s2t\tkd_t2s\tce_t\tkq\ttotal"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last: LossReport | None):
        super().__init__(f"non-finite loss at step {step}; last finite report: {last}")
        self.step = step
        self.last = last


@dataclass
class RunConfig:
    mode: str = "dskd-cma"
    divergence: DivergenceKind = field(default_factory=DivergenceKind)
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    seed: int = 1
    swap_kd_args: bool = False
    kq_weight: float = 1.0
    kq_real_class: str = "query"
    adversary_lr: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown training mode {self.mode!r}; expected one of {MODES}")

    @property
    def kq(self) -> KqMode:
        return KqMode(KQ_OF_MODE.get(self.mode, "none"), self.kq_weight, self.kq_real_class)

    @classmethod
    def from_config(cls, cfg: Config) -> RunConfig:
        mode = cfg["train.mode"]
        kq_mode = cfg["kq.mode"]
        if kq_mode != "auto" and kq_mode != KQ_OF_MODE.get(mode, "none"):
            raise ContractError(f"kq.mode={kq_mode} conflicts with train.mode={mode}")
        return cls(
            mode=mode,
            divergence=DivergenceKind(cfg["train.divergence"], cfg["train.skew_lambda"], cfg["train.akl_mu"]),
            lr=cfg["train.lr"],
            steps=cfg["train.steps"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["train.seed"],
            swap_kd_args=cfg["train.swap_kd_args"],
            kq_weight=cfg["kq.weight"],
            kq_real_class=cfg["kq.real_class"],
            adversary_lr=cfg["kq.adversary_lr"],
        )


@dataclass
class TrainResult:
    student: TinyLM
    projectors: Projectors
    log: list[LossReport]
    adversary: Discriminator | Critic | None = None


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def batch_stream(n_examples: int, batch_size: int, seed: int):
    """Index batches over reshuffled epochs; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n_examples)
        for start in range(0, n_examples - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def _finite(report: LossReport) -> bool:
    return bool(np.all(np.isfinite(report.as_row())))


def train(
    cfg: RunConfig,
    examples: list[PairExample],
    teacher: TinyLM,
    student: TinyLM,
    teacher_vocab: Vocabulary,
    student_vocab: Vocabulary,
    on_step=None,
) -> TrainResult:
    """Optimise ``student`` (and projectors) for ``cfg.steps`` steps."""
    if not teacher.frozen:
        raise ContractError("the teacher must be frozen before distillation")
    if cfg.mode == "dskd-same-tok" and teacher.config.vocab_size != student.config.vocab_size:
        raise ContractError("same-tokenizer distillation needs teacher and student on one vocabulary")
    if len(examples) < cfg.batch_size:
        raise ContractError("fewer examples than one batch")
    data_seed, proj_seed, adv_seed = _seeds(cfg.seed, 3)
    proj = Projectors(student.config.hidden_dim, teacher.config.hidden_dim, seed=proj_seed)
    params = student.parameters()
    if cfg.mode in ALIGNMENT:
        params = params + proj.parameters()
    opt = Adam(params, lr=cfg.lr)

    kq = cfg.kq
    adversary = None
    adv_opt = None
    if kq.name == "ga":
        adversary = Discriminator(2 * teacher.config.hidden_dim, seed=adv_seed)
    elif kq.name == "ct":
        adversary = Critic(2 * teacher.config.hidden_dim, seed=adv_seed)
    if adversary is not None:
        adv_opt = Adam(adversary.parameters(), lr=cfg.adversary_lr)

    max_seq = (teacher.config.max_seq, student.config.max_seq)
    stream = batch_stream(len(examples), cfg.batch_size, data_seed)
    history: list[LossReport] = []
    last = None
    for step in range(1, cfg.steps + 1):
        batch = collate([examples[i] for i in next(stream)], teacher_vocab.pad, student_vocab.pad, max_seq)
        opt.zero_grad()
        total, report = _step_loss(cfg, batch, teacher, student, proj, kq, adversary, adv_opt)
        if not _finite(report):
            raise TrainingDiverged(step, last)
        total.backward()
        opt.step()
        history.append(report)
        last = report
        if on_step is not None:
            on_step(step, report)
    return TrainResult(student=student, projectors=proj, log=history, adversary=adversary)


def _step_loss(cfg, batch: Batch, teacher, student, proj, kq, adversary, adv_opt):
    s, t = batch.student, batch.teacher
    s_out = student.forward(s.ids, s.gold, s.valid)
    if cfg.mode == "sft":
        ce_s = ce_loss(s_out.logits, s.gold, s.response)
        return ce_s, LossReport(ce_s=ce_s.item(), total=ce_s.item(), ce_only=True)

    if cfg.mode == "dskd-same-tok":
        t_out = teacher.forward(s.ids, s.gold, s.valid, grad=False)
        ce_s = ce_loss(s_out.logits, s.gold, s.response)
        p_s = T.softmax_rows(s_out.logits)
        p_t = T.softmax_rows(t_out.logits)
        pair = (p_t, p_s) if cfg.swap_kd_args else (p_s, p_t)
        kd = divergence(cfg.divergence, *pair, s.response)
        total = T.add(T.scale(ce_s, 0.5), T.scale(kd, 0.5))
        return total, LossReport(ce_s=ce_s.item(), kd_t2s=kd.item(), total=total.item())

    t_out = teacher.forward(t.ids, t.gold, t.valid, grad=False)
    state = run_cma(s_out, t_out, proj, ALIGNMENT[cfg.mode], batch.m_t2s, s.valid, t.valid)
    parts = dual_space_losses(
        state, s_out, t_out, student.head, teacher.head, cfg.divergence,
        s.response, t.response, s.gold, swap_args=cfg.swap_kd_args,
    )
    report = parts.report()
    if adversary is None:
        return parts.total, report

    loss_fn = ga_losses if kq.name == "ga" else ct_losses
    extra = (kq.real_class,) if kq.name == "ga" else ()
    keys = valid_rows(state.K, t.valid)
    queries = valid_rows(state.Q, s.valid)
    adv_loss, _ = loss_fn(keys, queries, adversary, *extra)
    adv_opt.zero_grad()
    adv_loss.backward()
    adv_opt.step()
    _, gen_loss = loss_fn(keys, queries, adversary, *extra)
    total = combine(parts.total, gen_loss, kq)
    report.kq = kq.weight * gen_loss.item()
    report.total = total.item()
    return total, report


def format_log(history: list[LossReport]) -> str:
    lines = [LOG_HEADER]
    for step, r in enumerate(history, start=1):
        lines.append("\t".join([str(step)] + [f"{v:.17g}" for v in r.as_row()]))
    return "\n".join(lines) + "\n"


# teacher pre-training --------------------------------------------------------


def pretrain(
    model: TinyLM,
    records: list[DatasetRecord],
    vocab: Vocabulary,
    steps: int,
    lr: float,
    batch_size: int = 16,
    val_records: list[DatasetRecord] | None = None,
    patience: int = 3,
    eval_every: int = 100,
    seed: int = 0,
) -> list[float]:
    """Plain CE training on responses; stops early once validation CE plateaus.

    Returns the validation CE trace (empty without ``val_records``).
    """
    encoded = [encode_record(vocab, r) for r in records]
    val = [encode_record(vocab, r) for r in val_records] if val_records else []
    opt = Adam(model.parameters(), lr=lr)
    stream = batch_stream(len(encoded), batch_size, seed)
    trace: list[float] = []
    best, stale = np.inf, 0
    for step in range(1, steps + 1):
        side = pad_side([encoded[i] for i in next(stream)], vocab.pad, model.config.max_seq)
        opt.zero_grad()
        out = model.forward(side.ids, side.gold, side.valid)
        loss = ce_loss(out.logits, side.gold, side.response)
        loss.backward()
        opt.step()
        if val and step % eval_every == 0:
            trace.append(validation_ce(model, val, vocab))
            if trace[-1] < best - 1e-4:
                best, stale = trace[-1], 0
            else:
                stale += 1
                if stale >= patience:
                    break
    return trace


def validation_ce(model: TinyLM, encoded, vocab: Vocabulary, batch_size: int = 64) -> float:
    """Token-weighted mean response CE over ``encoded`` examples."""
    total, count = 0.0, 0
    for start in range(0, len(encoded), batch_size):
        side = pad_side(encoded[start : start + batch_size], vocab.pad, model.config.max_seq)
        out = model.forward(side.ids, side.gold, side.valid, grad=False)
        n = int(side.response.sum())
        total += ce_loss(out.logits, side.gold, side.response).item() * n
        count += n
    return total / count


def build_teacher(cfg: Config, vocab: Vocabulary, train_records, val_records) -> TinyLM:
    tc = cfg.section("model.teacher")
    model = TinyLM(ModelConfig(len(vocab), tc["hidden_dim"], tc["num_layers"], tc["num_heads"], tc["max_seq"], tc["seed"]))
    pretrain(
        model, train_records, vocab, tc["pretrain_steps"], tc["pretrain_lr"],
        val_records=val_records, patience=tc["patience"], seed=tc["seed"],
    )
    return model.freeze()


def build_student(cfg: Config, vocab: Vocabulary, seed: int) -> TinyLM:
    sc = cfg.section("model.student")
    return TinyLM(ModelConfig(len(vocab), sc["hidden_dim"], sc["num_layers"], sc["num_heads"], sc["max_seq"], seed))


def encode_all(records, teacher_vocab: Vocabulary, student_vocab: Vocabulary) -> list[PairExample]:
    return [encode_pair(r, teacher_vocab, student_vocab) for r in records]


# evaluation ----------------------------------------------------------------------


@dataclass
class EvalResult:
    seed: int
    scores: dict[str, list[float]]
    generations: dict[str, list[str]]

    def mean(self, split: str) -> float:
        return float(np.mean(self.scores[split]))

    @property
    def overall(self) -> float:
        return float(np.mean([s for split in self.scores.values() for s in split]))


def generate(student: TinyLM, vocab: Vocabulary, prompts: list[str], max_new: int, batch_size: int = 64) -> list[str]:
    from .tokenizers import tokenize

    out: list[str] = []
    for start in range(0, len(prompts), batch_size):
        chunk = [[vocab.bos] + tokenize(vocab, p).ids for p in prompts[start : start + batch_size]]
        for ids in greedy_decode_batch(student, chunk, max_new, vocab.eos, vocab.pad):
            out.append(decode(vocab, ids))
    return out


def evaluate(student: TinyLM, vocab: Vocabulary, datasets: dict[str, list[DatasetRecord]], max_new: int = 40, seed: int = 0) -> EvalResult:
    scores, gens = {}, {}
    for name, records in datasets.items():
        texts = generate(student, vocab, [r.prompt for r in records], max_new)
        gens[name] = texts
        scores[name] = [rouge_l(t, r.output) for t, r in zip(texts, records)]
    return EvalResult(seed=seed, scores=scores, generations=gens)


def aggregate(results: list[EvalResult]) -> dict[str, tuple[float, float]]:
    """Mean and std over seeds of each split's mean score (plus ``all``)."""
    out = {}
    for split in results[0].scores:
        means = [r.mean(split) for r in results]
        out[split] = (float(np.mean(means)), float(np.std(means)))
    overall = [r.overall for r in results]
    out["all"] = (float(np.mean(overall)), float(np.std(overall)))
    return out


def eval_csv(results: list[EvalResult]) -> str:
    lines = ["seed,split,index,rouge_l"]
    for r in results:
        for split, scores in r.scores.items():
            lines.extend(f"{r.seed},{split},{i},{s:.10f}" for i, s in enumerate(scores))
    return "\n".join(lines) + "\n"


def eval_report(results: list[EvalResult], title: str = "") -> str:
    agg = aggregate(results)
    lines = [title] if title else []
    lines.append(f"seeds: {','.join(str(r.seed) for r in results)}")
    for split, (mu, sd) in agg.items():
        lines.append(f"{split:<10} rouge_l mean {mu:.6f} std {sd:.6f}")
    return "\n".join(lines) + "\n"


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
