"""Run configuration: an INI-style ``key = value`` file with one section per
pipeline stage. Unknown sections or keys are rejected."""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import Corpus
from .model import TrainSettings, TransformerConfig
from .pipeline import QuantSetup
from .quant import QuantSpec
from .search import SearchConfig
from .tuning import TuneConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/demo"
    corpus: str = ""
    split: float = 0.9


@dataclass
class ModelSection:
    arch: str = "llama-ish"
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 384
    max_seq_len: int = 512


@dataclass
class TrainSection:
    steps: int = 3000
    batch_size: int = 16
    seq_len: int = 160
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.1
    bos_prob: float = 0.5


@dataclass
class QuantSection:
    act_bits: int = 8
    act_symmetric: bool = False
    act_granularity: str = "per-tensor"
    act_range: str = "static"
    weight_bits: int = 8
    weight_symmetric: bool = True
    weight_granularity: str = "per-channel-group"
    group_size: int = 128
    smooth: bool = False
    alpha: float = 0.8
    calib_sequences: int = 32
    calib_len: int = 128


@dataclass
class SearchSection:
    max_len: int = 16
    tau: float = 0.5
    seeds: str = "bos,newline"
    batch_size: int = 64
    seq_len: int = 128
    fixed_text: bool = False
    threads: int = 1


@dataclass
class TuneSection:
    lam: float = 0.01
    epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 8
    seq_len: int = 128
    n_sequences: int = 2048


@dataclass
class EvalSection:
    n_texts: int = 8
    seq_len: int = 128


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    quant: QuantSection = field(default_factory=QuantSection)
    search: SearchSection = field(default_factory=SearchSection)
    tune: TuneSection = field(default_factory=TuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- serialization ---------------------------------------------------------
    def dumps(self) -> str:
        out = io.StringIO()
        for sec in fields(self):
            out.write(f"[{sec.name}]\n")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str  # type: ignore[assignment,method-assign]
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        sections = {f.name for f in fields(cls)}
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}]")
            target = getattr(cfg, name)
            hints = typing.get_type_hints(type(target))
            known = {f.name for f in fields(target)}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                setattr(target, key, _parse(raw, hints[key], f"{name}.{key}"))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            return cls.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def override(self, dotted: str, value: str) -> None:
        sec, _, key = dotted.partition(".")
        if not hasattr(self, sec) or not key:
            raise ConfigError(f"bad override {dotted!r}")
        target = getattr(self, sec)
        hints = typing.get_type_hints(type(target))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{sec}]")
        setattr(target, key, _parse(value, hints[key], dotted))

    # -- library objects -------------------------------------------------------
    def model_config(self) -> TransformerConfig:
        m = self.model
        try:
            return TransformerConfig.preset(m.arch, d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
                                            d_ff=m.d_ff, max_seq_len=m.max_seq_len)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_settings(self) -> TrainSettings:
        t = self.train
        return TrainSettings(steps=t.steps, batch_size=t.batch_size, seq_len=t.seq_len, lr=t.lr,
                             warmup=t.warmup, weight_decay=t.weight_decay, bos_prob=t.bos_prob)

    def act_spec(self) -> QuantSpec:
        q = self.quant
        return _spec(bits=q.act_bits, symmetric=q.act_symmetric, granularity=q.act_granularity,
                     group_size=q.group_size, range_mode=q.act_range)

    def weight_spec(self) -> QuantSpec:
        q = self.quant
        return _spec(bits=q.weight_bits, symmetric=q.weight_symmetric, granularity=q.weight_granularity,
                     group_size=q.group_size, range_mode="dynamic")

    def quant_setup(self) -> QuantSetup:
        q = self.quant
        return QuantSetup(act=self.act_spec(), weight=self.weight_spec(),
                          smooth_alpha=q.alpha if q.smooth else None,
                          calib_sequences=q.calib_sequences, calib_len=q.calib_len,
                          calib_seed=self.run.seed + 1)

    def search_config(self) -> SearchConfig:
        s = self.search
        seeds = tuple(x.strip() for x in s.seeds.split(",") if x.strip())
        try:
            return SearchConfig(max_len=s.max_len, tau=s.tau, seeds=seeds, batch_size=s.batch_size,
                                seed=self.run.seed, seq_len=s.seq_len, fixed_text=s.fixed_text,
                                threads=s.threads, spec=self.act_spec())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def tune_config(self) -> TuneConfig:
        t = self.tune
        try:
            return TuneConfig(lam=t.lam, epochs=t.epochs, lr=t.lr, batch_size=t.batch_size, seq_len=t.seq_len,
                              n_sequences=t.n_sequences, seed=self.run.seed, spec=self.act_spec())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def corpus(self) -> Corpus:
        return Corpus.load(self.run.corpus or None, split=self.run.split)


def _spec(**kw: Any) -> QuantSpec:
    try:
        return QuantSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, typ: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
