"""Flat ``key = value`` run configuration.

Grammar: one ``key = value`` per line; blank lines and lines starting with
``#`` are ignored. Keys are dotted (``train.lr``). Values are parsed by the
type of the key's default: int, float, bool (``true``/``false``) or string
(taken verbatim after trimming). Unknown keys are errors.
"""
from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    "data.train": "data/train.jsonl",
    "data.val": "data/val.jsonl",
    "data.test_id": "data/test_id.jsonl",
    "data.test_ood": "data/test_ood.jsonl",
    "data.seed": 0,
    "model.teacher.hidden_dim": 32,
    "model.teacher.num_layers": 2,
    "model.teacher.num_heads": 2,
    "model.teacher.max_seq": 96,
    "model.teacher.num_merges": 150,
    "model.teacher.seed": 0,
    "model.teacher.checkpoint": "",
    "model.teacher.pretrain_steps": 1500,
    "model.teacher.pretrain_lr": 0.003,
    "model.teacher.patience": 3,
    "model.student.hidden_dim": 16,
    "model.student.num_layers": 2,
    "model.student.num_heads": 2,
    "model.student.max_seq": 96,
    "train.mode": "dskd-cma",
    "train.divergence": "kl",
    "train.skew_lambda": 0.1,
    "train.akl_mu": 0.5,
    "train.swap_kd_args": False,
    "train.lr": 0.001,
    "train.steps": 500,
    "train.batch_size": 8,
    "train.seed": 1,
    "kq.mode": "auto",
    "kq.weight": 1.0,
    "kq.adversary_lr": 0.001,
    "kq.real_class": "query",
    "eval.max_new": 40,
    "eval.splits": "test_id,test_ood",
    "eval.seeds": "1,2,3,4,5",
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class Config(dict):
    """All keys of :data:`DEFAULTS`, overridden where given."""

    def __init__(self, overrides: dict | None = None):
        super().__init__(DEFAULTS)
        for key, value in (overrides or {}).items():
            self[key] = value

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _parse_value(key, value)
        elif isinstance(DEFAULTS[key], float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        super().__setitem__(key, value)

    def section(self, prefix: str) -> dict:
        prefix = prefix.rstrip(".") + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(self.items()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def loads(text: str) -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def load(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text(encoding="utf-8"))
