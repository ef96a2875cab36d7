"""Command-line interface: ``crosstok <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures;
errors are reported as a single ``crosstok: error: ...`` line on stderr.

A ``train`` run directory holds::

    config.cfg          the fully resolved configuration
    teacher.vocab       student.vocab
    teacher.ckpt        student.ckpt        projectors.ckpt
    train_log.tsv       one line per step
    eval.csv            per-example ROUGE-L
    eval_report.txt     per-split means
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .align import align_chunks, format_quads
from .cma import Projectors, run_cma
from .config import Config, ConfigError, load
from .data import DataError, SPLITS, collate, corpus_lines, generate_corpus, load_jsonl, write_jsonl
from .lm import load_checkpoint, save_checkpoint
from .tensor import ContractError
from .tokenizers import Vocabulary, build_vocab, tokenize

PROG = "crosstok"
RUN_FILES = {
    "config": "config.cfg",
    "teacher_vocab": "teacher.vocab",
    "student_vocab": "student.vocab",
    "teacher": "teacher.ckpt",
    "student": "student.ckpt",
    "projectors": "projectors.ckpt",
    "log": "train_log.tsv",
    "eval_csv": "eval.csv",
    "eval_report": "eval_report.txt",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# pipeline pieces shared with the tests ------------------------------------------------


def resolve(base: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def load_splits(cfg: Config, base: Path, names=SPLITS) -> dict:
    return {name: load_jsonl(resolve(base, cfg[f"data.{name}"])) for name in names}


def build_vocabs(cfg: Config, train_records) -> tuple[Vocabulary, Vocabulary]:
    """Teacher and student vocabularies; same-tokenizer runs share the student's."""
    lines = corpus_lines(train_records)
    student = build_vocab(lines, "char")
    if cfg["train.mode"] == "dskd-same-tok":
        return student, student
    teacher = build_vocab(lines, "merge", cfg["model.teacher.num_merges"], seed=cfg["model.teacher.seed"])
    return teacher, student


def obtain_teacher(cfg: Config, base: Path, vocab: Vocabulary, train, val):
    ckpt = cfg["model.teacher.checkpoint"]
    if not ckpt:
        return H.build_teacher(cfg, vocab, train, val)
    teacher = load_checkpoint(resolve(base, ckpt))
    if teacher.config.vocab_size != len(vocab):
        raise ContractError(f"teacher checkpoint has vocabulary size {teacher.config.vocab_size}, tokenizer has {len(vocab)}")
    return teacher.freeze()


def eval_splits(cfg: Config) -> list[str]:
    names = [s.strip() for s in cfg["eval.splits"].split(",") if s.strip()]
    unknown = [s for s in names if s not in SPLITS]
    if unknown:
        raise ConfigError(f"eval.splits: unknown split(s) {', '.join(unknown)}")
    return names


def run_training(cfg: Config, out_dir: Path, base: Path) -> H.EvalResult:
    """Train one student as configured and write the run directory.

    Data paths are stored resolved, so later ``eval``/``heatmap`` calls find
    the same files from any working directory.
    """
    cfg = Config(cfg)
    for name in SPLITS:
        cfg[f"data.{name}"] = str(resolve(base, cfg[f"data.{name}"]).resolve())
    run = H.RunConfig.from_config(cfg)
    splits = eval_splits(cfg)
    data = load_splits(cfg, base, ["train", "val", *splits])
    t_vocab, s_vocab = build_vocabs(cfg, data["train"])
    teacher = obtain_teacher(cfg, base, t_vocab, data["train"], data["val"])
    student = H.build_student(cfg, s_vocab, run.seed)
    examples = H.encode_all(data["train"], t_vocab, s_vocab)
    result = H.train(run, examples, teacher, student, t_vocab, s_vocab)
    ev = H.evaluate(student, s_vocab, {s: data[s] for s in splits}, cfg["eval.max_new"], seed=run.seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    f = {k: out_dir / v for k, v in RUN_FILES.items()}
    cfg.save(f["config"])
    t_vocab.save(f["teacher_vocab"])
    s_vocab.save(f["student_vocab"])
    save_checkpoint(teacher, f["teacher"])
    save_checkpoint(result.student, f["student"])
    result.projectors.save(f["projectors"])
    H.write_text(f["log"], H.format_log(result.log))
    H.write_text(f["eval_csv"], H.eval_csv([ev]))
    H.write_text(f["eval_report"], H.eval_report([ev], title=f"mode {run.mode}"))
    return ev


def attention_maps(run_dir: Path, record, mode: str | None = None) -> dict[str, np.ndarray]:
    """Both attention matrices and the chunk matrix of one example."""
    cfg = load(run_dir / RUN_FILES["config"])
    mode = mode or H.ALIGNMENT.get(cfg["train.mode"], "cma")
    t_vocab = Vocabulary.load(run_dir / RUN_FILES["teacher_vocab"])
    s_vocab = Vocabulary.load(run_dir / RUN_FILES["student_vocab"])
    teacher = load_checkpoint(run_dir / RUN_FILES["teacher"])
    student = load_checkpoint(run_dir / RUN_FILES["student"])
    proj = Projectors.load(run_dir / RUN_FILES["projectors"])
    ex = H.encode_all([record], t_vocab, s_vocab)
    batch = collate(ex, t_vocab.pad, s_vocab.pad)
    s, t = batch.student, batch.teacher
    s_out = student.forward(s.ids, s.gold, s.valid, grad=False)
    t_out = teacher.forward(t.ids, t.gold, t.valid, grad=False)
    state = run_cma(s_out, t_out, proj, mode, batch.m_t2s, s.valid, t.valid)
    return {"A_t2s": state.A_t2s.data[0], "A_s2t": state.A_s2t.data[0], "M": batch.m_t2s[0]}


def write_csv(path: Path, a: np.ndarray) -> None:
    path.write_text("".join(",".join(f"{v:.10g}" for v in row) + "\n" for row in a), encoding="ascii")


def write_pgm(path: Path, a: np.ndarray) -> None:
    """Plain (P2) greymap; values are clipped to [0, 1] and scaled to 0..255."""
    px = np.rint(np.clip(a, 0.0, 1.0) * 255).astype(int)
    rows = [" ".join(str(v) for v in row) for row in px]
    path.write_text(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n" + "\n".join(rows) + "\n", encoding="ascii")


# subcommands ----------------------------------------------------------------------------


def _config_from_args(args) -> tuple[Config, Path]:
    if args.config:
        cfg, base = load(args.config), Path(args.config).resolve().parent
    else:
        cfg, base = Config(), Path.cwd()
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg[key] = value
    for key, attr in (("train.mode", "mode"), ("train.divergence", "divergence"), ("train.steps", "steps"), ("train.seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    return cfg, base


def cmd_gen_data(args) -> int:
    sizes = {name: getattr(args, name) for name in SPLITS if getattr(args, name) is not None}
    corpus = generate_corpus(args.seed if args.seed is not None else 0, sizes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in corpus.items():
        write_jsonl(records, out / f"{name}.jsonl")
    print(" ".join(f"{name}={len(r)}" for name, r in corpus.items()))
    return 0


def cmd_build_vocab(args) -> int:
    lines = corpus_lines(load_jsonl(args.corpus))
    vocab = build_vocab(lines, args.kind, args.num_merges, seed=args.seed or 0)
    vocab.save(args.out)
    print(f"{args.kind} vocabulary with {len(vocab)} pieces written to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    tok = tokenize(Vocabulary.load(args.vocab), args.text)
    print("ids\t" + " ".join(map(str, tok.ids)))
    print("ends\t" + " ".join(map(str, tok.end_offsets)))
    return 0


def cmd_align(args) -> int:
    t = tokenize(Vocabulary.load(args.teacher_vocab), args.text)
    s = tokenize(Vocabulary.load(args.student_vocab), args.text)
    for line in format_quads(align_chunks(t, s), t, s):
        print(line)
    return 0


def cmd_train(args) -> int:
    cfg, base = _config_from_args(args)
    out = Path(args.out)
    ev = run_training(cfg, out, base)
    for split in ev.scores:
        print(f"{split}\trouge_l\t{ev.mean(split):.6f}")
    print(f"run written to {out}")
    return 0


def cmd_eval(args) -> int:
    results = []
    for run_dir in map(Path, args.run):
        cfg = load(run_dir / RUN_FILES["config"])
        if args.seed is not None:
            cfg["train.seed"] = args.seed
        base = Path(args.data_root) if args.data_root else Path.cwd()
        splits = eval_splits(cfg)
        data = load_splits(cfg, base, splits)
        student = load_checkpoint(run_dir / RUN_FILES["student"])
        vocab = Vocabulary.load(run_dir / RUN_FILES["student_vocab"])
        results.append(H.evaluate(student, vocab, data, cfg["eval.max_new"], seed=cfg["train.seed"]))
    report = H.eval_report(results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        H.write_text(out / RUN_FILES["eval_csv"], H.eval_csv(results))
        H.write_text(out / RUN_FILES["eval_report"], report)
    sys.stdout.write(report)
    return 0


def cmd_heatmap(args) -> int:
    if bool(args.run) == bool(args.checkpoint):
        raise UsageError("give exactly one of --run or --checkpoint")
    run_dir = Path(args.run) if args.run else Path(args.checkpoint).parent
    cfg = load(run_dir / RUN_FILES["config"])
    base = Path(args.data_root) if args.data_root else Path.cwd()
    records = load_jsonl(resolve(base, cfg[f"data.{args.split}"]))
    if not 0 <= args.example < len(records):
        raise ContractError(f"--example {args.example} is out of range for {len(records)} records")
    maps = attention_maps(run_dir, records[args.example], args.mode)
    out = Path(args.out) if args.out else run_dir / f"heatmap_{args.split}_{args.example}"
    out.mkdir(parents=True, exist_ok=True)
    for name, a in maps.items():
        write_csv(out / f"{name}.csv", a)
        write_pgm(out / f"{name}.pgm", a)
    print(f"heatmaps written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Cross-tokenizer knowledge distillation workbench.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic corpus as JSONL splits")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    for name in SPLITS:
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int, metavar="N")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-vocab", help="build a tokenizer vocabulary from a JSONL corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--kind", choices=("char", "merge"), required=True)
    b.add_argument("--num-merges", type=int, default=150)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_build_vocab)

    t = sub.add_parser("tokenize", help="print token ids and end offsets")
    t.add_argument("--vocab", required=True)
    t.add_argument("--text", required=True)
    t.set_defaults(func=cmd_tokenize)

    a = sub.add_parser("align", help="print the aligned chunks of a text under two vocabularies")
    a.add_argument("--teacher-vocab", required=True)
    a.add_argument("--student-vocab", required=True)
    a.add_argument("--text", required=True)
    a.set_defaults(func=cmd_align)

    tr = sub.add_parser("train", help="pre-train or load the teacher, distil, evaluate")
    tr.add_argument("--config")
    tr.add_argument("--out", default="run")
    tr.add_argument("--mode", choices=H.MODES)
    tr.add_argument("--divergence")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained runs and aggregate over them")
    e.add_argument("--run", nargs="+", required=True)
    e.add_argument("--data-root", help="directory the configured data paths are relative to")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="export attention and chunk matrices of one example")
    h.add_argument("--run")
    h.add_argument("--checkpoint", help="student checkpoint inside a run directory")
    h.add_argument("--example", type=int, required=True)
    h.add_argument("--split", choices=SPLITS, default="test_id")
    h.add_argument("--mode", choices=("cma", "clp", "cla"))
    h.add_argument("--data-root")
    h.add_argument("--out")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DataError, ConfigError, OSError, H.TrainingDiverged, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
