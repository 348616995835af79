"""Run configuration: one flat set of ``key = value`` settings.

Every tunable default of the pipeline lives here.  Config files are plain
text, one ``key = value`` per line, ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .cf import CfTrainConfig
from .ranker import RankerConfig
from .tokenizer import TokenizerTrainConfig

__all__ = ["Config", "ConfigError", "load_config", "parse_config_text"]


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # data
    data: str = ""
    format: str = "tsv"
    use_validation: bool = True
    unseen_fraction: float = 0.0
    seed: int = 0
    templates: str = ""
    # collaborative embeddings
    cf_method: str = "lightgcn"
    cf_layers: int = 3
    cf_dim: int = 64
    cf_epochs: int = 200
    cf_batch_size: int = 2048
    cf_lr: float = 1e-3
    cf_l2: float = 1e-4
    cf_eval_every: int = 10
    cf_patience: int = 5
    cf_init_std: float = 0.1
    # tokenizers
    tok_K: int = 3
    tok_L: int = 0  # 0: 256 below 10k entities, else 512
    tok_code_dim: int = 32
    tok_hidden: int = 256
    tok_rho: float = 0.2
    tok_resample: str = "per_epoch"
    tok_beta: float = 0.25
    tok_epochs: int = 100
    tok_batch_size: int = 128
    tok_lr: float = 1e-3
    tok_weight_decay: float = 0.01
    tok_dead_code_every: int = 10
    tok_quantization: str = "kway"
    # query encoder and ranking loss
    rank_margin: float = 0.1
    rank_embed_dim: int = 128
    rank_hidden: int = 256
    rank_mode: str = "mean_pool"
    rank_epochs: int = 100
    rank_batch_size: int = 128
    rank_lr: float = 1e-3
    rank_weight_decay: float = 0.01
    rank_max_history: int = 100
    rank_eval_every: int = 5
    rank_patience: int = 3
    rank_repeats: int = 1
    # evaluation and serving
    eval_exclude_train: bool = True
    eval_cutoffs: str = "10,20,30"
    top_k: int = 20
    bench_users: int = 100
    bench_threads: int = 1

    @property
    def cutoffs(self) -> tuple:
        return tuple(int(c) for c in self.eval_cutoffs.split(",") if c.strip())

    def cf(self) -> CfTrainConfig:
        return CfTrainConfig(self.cf_method, self.cf_layers, self.cf_dim, self.cf_epochs, self.cf_batch_size,
                             self.cf_lr, self.cf_l2, self.seed, self.cf_eval_every, self.cf_patience,
                             self.cf_init_std)

    def tokenizer(self) -> TokenizerTrainConfig:
        return TokenizerTrainConfig(self.tok_K, self.tok_L or None, self.tok_code_dim, self.tok_hidden,
                                    self.tok_rho, self.tok_resample, self.tok_beta, self.tok_epochs,
                                    self.tok_batch_size, self.tok_lr, self.tok_weight_decay, self.seed,
                                    self.tok_dead_code_every, self.tok_quantization)

    def ranker(self) -> RankerConfig:
        return RankerConfig(self.rank_margin, self.rank_embed_dim, self.rank_hidden, self.rank_mode,
                            self.rank_epochs, self.rank_batch_size, self.rank_lr, self.rank_weight_decay,
                            self.rank_max_history, self.seed, self.rank_eval_every, self.rank_patience,
                            self.rank_repeats)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def updated(self, **overrides) -> "Config":
        return parse_overrides(self, overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_overrides(base: Config, overrides: dict) -> Config:
    kinds = {f.name: f.type for f in fields(Config)}
    values = {}
    for key, raw in overrides.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    return dataclasses.replace(base, **values)


def parse_config_text(text: str, base: Config | None = None) -> Config:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        overrides[key.strip()] = value.strip()
    return parse_overrides(base or Config(), overrides)


def load_config(path) -> Config:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
