"""Experiment configuration: flat ``section.key = value`` text files.

Example::

    task = cls
    seed = 3
    data.synthetic = true
    model.d = 64
    drop.variant = column
    drop.p = 0.3
    drop.w = 1

Lines starting with ``#`` are comments.  Every key can also be overridden on
the command line as ``--drop.p=0.2``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dropattn import RESCALES, VARIANTS, DropSpec
from .errors import ConfigError
from .heads import POOLINGS

TASKS = ("cls", "tag", "nli")


@dataclass
class DataConfig:
    train: str = ""
    dev: str = ""
    test: str = ""
    synthetic: bool = False
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 1000
    length: int = 12
    vocab_size: int = 64
    reliability: float = 0.95
    k: int = 1
    max_vocab: int = 20000
    min_freq: int = 1


@dataclass
class ModelConfig:
    d: int = 64
    d_ff: int = 128
    heads: int = 4
    layers: int = 2
    max_len: int = 128
    pooling: str = "max"
    hidden: int = 0


@dataclass
class DropConfig:
    variant: str = "column"
    p: float = 0.0
    w: int = 1
    rescale: str = "normalized"
    dropout: float = 0.0
    layers: str = "all"

    def spec(self) -> DropSpec:
        return DropSpec(self.variant, self.p, self.w, self.rescale, "training")

    def layer_set(self):
        if self.layers.strip() == "all":
            return None
        return frozenset(int(x) for x in self.layers.split(",") if x.strip())


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    patience: int = 5


@dataclass
class ExperimentConfig:
    task: str = "cls"
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    drop: DropConfig = field(default_factory=DropConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "ExperimentConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, key)

        need(self.task in TASKS, "task", f"must be one of {TASKS}, got {self.task!r}")
        m, d, o = self.model, self.drop, self.optim
        for key in ("d", "d_ff", "heads", "layers", "max_len"):
            need(getattr(m, key) >= 1, f"model.{key}", "must be a positive integer")
        need(m.d % m.heads == 0, "model.d", f"width {m.d} is not divisible by {m.heads} heads")
        need(m.d % 2 == 0, "model.d", "width must be even for the positional table")
        need(m.pooling in POOLINGS, "model.pooling", f"must be one of {POOLINGS}")
        need(d.variant in VARIANTS, "drop.variant", f"must be one of {VARIANTS}")
        need(d.rescale in RESCALES, "drop.rescale", f"must be one of {RESCALES}")
        need(0.0 <= d.p < 1.0, "drop.p", f"rate must lie in [0, 1), got {d.p}")
        need(d.w >= 1, "drop.w", f"window must be >= 1, got {d.w}")
        need(0.0 <= d.dropout < 1.0, "drop.dropout", f"rate must lie in [0, 1), got {d.dropout}")
        try:
            d.layer_set()
        except ValueError:
            raise ConfigError(f"expected 'all' or comma-separated layer indices, got {d.layers!r}", "drop.layers") from None
        need(o.lr > 0, "optim.lr", "must be positive")
        need(0.0 <= o.beta1 < 1.0, "optim.beta1", "must lie in [0, 1)")
        need(0.0 <= o.beta2 < 1.0, "optim.beta2", "must lie in [0, 1)")
        need(o.eps > 0, "optim.eps", "must be positive")
        need(o.batch_size >= 1, "optim.batch_size", "must be >= 1")
        need(o.epochs >= 1, "optim.epochs", "must be >= 1")
        need(o.patience >= 1, "optim.patience", "must be >= 1")
        if self.data.synthetic:
            need(self.task == "cls", "data.synthetic", "the synthetic dataset is a classification task")
            need(0.5 <= self.data.reliability <= 1.0, "data.reliability", "must lie in [0.5, 1]")
            need(self.data.n_train >= 1, "data.n_train", "must be positive")
        else:
            need(bool(self.data.train), "data.train", "a training file is required unless data.synthetic = true")
        return self

    # ------------------------------------------------------------ text form

    def items(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    yield f"{f.name}.{g.name}", getattr(value, g.name)
            else:
                yield f.name, value

    def to_text(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def set(self, key: str, raw: str) -> None:
        target, name = self, key
        if "." in key:
            section, name = key.split(".", 1)
            if section not in {"data", "model", "drop", "optim"}:
                raise ConfigError("unknown section", key)
            target = getattr(self, section)
        hints = typing.get_type_hints(type(target))
        if name not in hints or dataclasses.is_dataclass(getattr(target, name, None)):
            raise ConfigError("unknown configuration key", key)
        setattr(target, name, _convert(raw, hints[name], key))

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, raw)
        for key, raw in (overrides or {}).items():
            cfg.set(key, raw)
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        return cls.from_text(text, overrides)


def _convert(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}", key) from None
