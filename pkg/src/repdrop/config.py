"""Experiment configuration: a sectioned key-value file read with configparser.

Defaults follow the full-scale training setup (GPT-2 small, 256-token
sequences, 100k steps). ``desk_preset`` shrinks model and budget to fit a
single CPU while keeping every other setting.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .objectives import ObjectiveSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    train: str = ""
    valid: str = ""
    test: str = ""
    max_vocab: int = 50257


@dataclass
class ModelSection:
    layers: int = 12
    heads: int = 12
    d_model: int = 768
    d_ff: int = 3072
    max_len: int = 256
    dropout: float = 0.1


@dataclass
class TrainSection:
    steps: int = 100_000
    lr: float = 5e-5
    batch_size: int = 128
    warmup: int = 10_000
    grad_clip: float = 1.0
    eval_interval: int = 10_000
    seq_len: int = 256
    weight_decay: float = 0.0
    log_interval: int = 100
    max_eval_docs: int = 0


@dataclass
class ObjectiveSection:
    kind: str = "mle"
    p: float = 0.6
    n: int = 2
    gamma: float = 0.2
    alpha: float = 1.0
    scope: str = "prefix_all"
    high_inflow_threshold: float = 0.03


@dataclass
class DecodeSection:
    prompt_len: int = 32
    gen_len: int = 128
    num_prompts: int = 0


@dataclass
class MetricsSection:
    ns: str = "2,3,4"
    w: int = 16

    def ns_tuple(self):
        return tuple(int(x) for x in self.ns.split(",") if x.strip())


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "objective": ObjectiveSection,
    "decode": DecodeSection,
    "metrics": MetricsSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    out: str = "runs"
    seed: int = 0
    name: str = ""

    def objective_spec(self) -> ObjectiveSpec:
        o = self.objective
        return ObjectiveSpec(kind=o.kind, p=o.p, n=o.n, gamma=o.gamma, alpha=o.alpha,
                             scope=o.scope, scope_seed=self.seed)

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        try:
            self.objective_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.train.warmup > self.train.steps:
            raise ConfigError("warmup must not exceed steps")
        if self.model.d_model % self.model.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.train.seq_len > self.model.max_len:
            raise ConfigError("seq_len must not exceed max_len")
        if check_paths:
            for key in ("train", "valid", "test"):
                path = getattr(self.data, key)
                if path and not os.path.exists(path):
                    raise ConfigError(f"{key} corpus {path!r} does not exist")
        return self

    def with_updates(self, **sections) -> "ExperimentConfig":
        """``cfg.with_updates(objective={"kind": "rep_dropout"}, seed=3)``"""
        out = replace(self)
        for key, value in sections.items():
            if isinstance(value, dict):
                setattr(out, key, replace(getattr(self, key), **value))
            else:
                setattr(out, key, value)
        return out

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        cp["run"] = {"name": self.name, "seed": str(self.seed), "out": self.out}
        for name in SECTIONS:
            cp[name] = {k: str(v) for k, v in asdict(getattr(self, name)).items()}
        return cp

    def to_ini(self) -> str:
        buf = io.StringIO()
        self.to_parser().write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_ini())

    def fingerprint(self) -> str:
        """Hash of every setting that influences training and evaluation."""
        d = {k: asdict(getattr(self, k)) for k in SECTIONS}
        d["seed"] = self.seed
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cfg = replace(base) if base is not None else cls()
        for section in cp.sections():
            if section == "run":
                run = cp["run"]
                cfg.name = run.get("name", cfg.name)
                cfg.out = run.get("out", cfg.out)
                if "seed" in run:
                    cfg.seed = _coerce(int, run["seed"], "run.seed")
                continue
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            current = getattr(cfg, section)
            known = {f.name: f.type for f in fields(current)}
            updates = {}
            for key, raw in cp[section].items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                kind = type(getattr(current, key))
                updates[key] = _coerce(kind, raw, f"{section}.{key}")
            setattr(cfg, section, replace(current, **updates))
        return cfg

    @classmethod
    def load(cls, path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        return cls.from_parser(cp, base)

    @classmethod
    def from_ini(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_parser(cp, base)


def _coerce(kind, raw: str, where: str):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {where}: {raw!r}") from e


def bundled_corpus_dir() -> str:
    """``data/kjv`` at the repository root."""
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.normpath(os.path.join(here, "..", "..", "data", "kjv"))


def desk_preset(data_dir: Optional[str] = None) -> ExperimentConfig:
    """Small model and budget for a single CPU on the bundled corpus."""
    d = data_dir or bundled_corpus_dir()
    return ExperimentConfig(
        data=DataSection(train=os.path.join(d, "train.txt"), valid=os.path.join(d, "valid.txt"),
                         test=os.path.join(d, "test.txt"), max_vocab=8000),
        model=ModelSection(layers=2, heads=4, d_model=64, d_ff=256, max_len=128, dropout=0.0),
        train=TrainSection(steps=4000, lr=1e-3, batch_size=16, warmup=400, eval_interval=0,
                           seq_len=128, log_interval=100, max_eval_docs=0),
        decode=DecodeSection(prompt_len=32, gen_len=128, num_prompts=200),
        out="runs",
    )
