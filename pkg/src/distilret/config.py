"""Run configuration: a flat YAML file mapped onto a validated dataclass.

Every knob that affects a training or evaluation run lives here so that a
run is reproducible from its config file plus the input artifacts alone.
There are no wall-clock or host-dependent defaults; the seed is mandatory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Raised when a config file is missing, malformed, or inconsistent."""


@dataclass
class RunConfig:
    # data artifacts
    passages: str = ""
    train_questions: str = ""
    dev_questions: str = ""
    vocab: str = ""
    run_dir: str = "run"

    # reproducibility; no default on purpose, enforced in validate()
    seed: int = -1
    init_seed: int | None = None  # parameter init; falls back to seed

    # encoder dimensions
    d_emb: int = 64
    d_h: int = 64
    d: int = 32

    # distillation
    tau: float = 1.0
    k: int = 8
    batch_size: int = 16
    dropout: float = 0.1

    # optimization
    peak_lr: float = 2e-5
    warmup_steps: int = 100
    total_steps: int = 1000

    # index maintenance
    refresh_every: int = 500
    num_shards: int = 4

    # checkpointing and selection
    checkpoint_every: int = 500
    selection_k: int = 20

    # teacher
    teacher_kind: str = "toy"
    teacher_alpha: float = 1.0
    teacher_endpoint: str | None = None
    teacher_timeout_s: float = 30.0

    # candidate composition: "topk", "inbatch", "inbatch:N", "mix:P,N,U"
    ablation: str = "topk"

    # evaluation
    eval_ks: list[int] = field(default_factory=lambda: [1, 5, 20, 100])

    # optional subsampling of the training set
    train_questions_limit: int | None = None

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed is required and must be a non-negative integer")
        if self.init_seed is not None and self.init_seed < 0:
            raise ConfigError("init_seed must be non-negative when given")
        for name in ("d_emb", "d_h", "d", "k", "batch_size", "num_shards"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps} and {self.total_steps}"
            )
        if self.refresh_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("refresh_every and checkpoint_every must be >= 1")
        if self.teacher_kind not in ("toy", "external"):
            raise ConfigError(f"teacher_kind must be 'toy' or 'external', got {self.teacher_kind!r}")
        if self.teacher_kind == "external" and not self.teacher_endpoint:
            raise ConfigError("teacher_kind 'external' requires teacher_endpoint")
        if self.teacher_alpha <= 0:
            raise ConfigError(f"teacher_alpha must be positive, got {self.teacher_alpha}")
        if self.teacher_timeout_s <= 0:
            raise ConfigError("teacher_timeout_s must be positive")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigError("eval_ks must be a non-empty list of positive integers")
        if sorted(self.eval_ks) != self.eval_ks:
            raise ConfigError("eval_ks must be sorted ascending")
        if self.selection_k < 1:
            raise ConfigError("selection_k must be >= 1")
        if self.train_questions_limit is not None and self.train_questions_limit < 1:
            raise ConfigError("train_questions_limit must be >= 1 when given")
        # parse errors surface at load time rather than mid-run
        from distilret.trainer import AblationSpec

        AblationSpec.parse(self.ablation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML mapping into a RunConfig. Unknown keys are fatal."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**raw)
    _coerce_types(cfg)
    cfg.validate()
    return cfg


def _coerce_types(cfg: RunConfig) -> None:
    # YAML "1" for an int field or an int for a float field is fine;
    # anything else is a type error worth naming.
    for name in ("seed", "d_emb", "d_h", "d", "k", "batch_size", "warmup_steps",
                 "total_steps", "refresh_every", "num_shards", "checkpoint_every",
                 "selection_k"):
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
    for name in ("init_seed", "train_questions_limit"):
        value = getattr(cfg, name)
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{name} must be an integer or null, got {value!r}")
    for name in ("tau", "dropout", "peak_lr", "teacher_alpha", "teacher_timeout_s"):
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        setattr(cfg, name, float(value))
    if not isinstance(cfg.eval_ks, list) or not all(
        isinstance(k, int) and not isinstance(k, bool) for k in cfg.eval_ks
    ):
        raise ConfigError(f"eval_ks must be a list of integers, got {cfg.eval_ks!r}")
    for name in ("passages", "train_questions", "dev_questions", "vocab", "run_dir",
                 "teacher_kind", "ablation"):
        if not isinstance(getattr(cfg, name), str):
            raise ConfigError(f"{name} must be a string, got {getattr(cfg, name)!r}")
    if cfg.teacher_endpoint is not None and not isinstance(cfg.teacher_endpoint, str):
        raise ConfigError(f"teacher_endpoint must be a string or null, got {cfg.teacher_endpoint!r}")
