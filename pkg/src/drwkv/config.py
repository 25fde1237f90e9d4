"""Declarative run configuration: ``section.key = value`` text files.

Lines look like ``train.steps = 5000``; ``#`` starts a comment. Unknown
sections or keys are rejected. Command-line flags override file values.
"""
from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bench import BenchConfig
from .lifelong import LifelongConfig
from .model import ConfigError, ModelConfig
from .train import TrainConfig


@dataclass
class EnvConfig:
    suite_seed: int = 2024
    episodes: int = 500
    noise: float = 0.1
    seed: int = 7
    eval_episodes: int = 20


@dataclass
class IOConfig:
    data_dir: str = ""  # empty: $DRWKV_DATA_DIR, else ./data
    out_dir: str = "runs"

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir or os.environ.get("DRWKV_DATA_DIR", "data"))


# Desk-scale model used by the experiments; ModelConfig's own defaults are the
# larger reference size.
EXPERIMENT_MODEL = dict(layers=2, width=32, heads=2, context=10)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**EXPERIMENT_MODEL))
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    lifelong: LifelongConfig = field(default_factory=lambda: LifelongConfig(steps_per_task=500))
    bench: BenchConfig = field(default_factory=BenchConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seeds: tuple = (1, 2, 3)

    def as_dict(self) -> dict:
        return asdict(self)


SECTIONS = ("model", "train", "env", "lifelong", "bench", "io")


def _coerce(raw: str, hint, key: str):
    args = typing.get_args(hint)
    if raw.lower() in ("none", "") and type(None) in args:
        return None
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    try:
        if base is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None
    return raw


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def apply(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return ``cfg`` with dotted ``section.key`` string values applied."""
    sections = {s: asdict(getattr(cfg, s)) for s in SECTIONS}
    seeds = cfg.seeds
    for key, raw in pairs.items():
        if key == "seeds":
            seeds = tuple(int(s) for s in raw.split(",") if s.strip())
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(getattr(cfg, sec)))
        sections[sec][name] = _coerce(str(raw), hints[name], key)
    built = {s: type(getattr(cfg, s))(**sections[s]) for s in SECTIONS}
    return replace(cfg, seeds=seeds, **built)


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        cfg = apply(cfg, parse_text(p.read_text(encoding="utf-8"), str(p)))
    return apply(cfg, overrides or {})


def to_lines(cfg: RunConfig) -> list[str]:
    """Flattened ``key=value`` lines; feeding them back through :func:`apply` is lossless."""
    lines = []
    for s in SECTIONS:
        for f in fields(getattr(cfg, s)):
            lines.append(f"{s}.{f.name}={getattr(getattr(cfg, s), f.name)}")
    lines.append("seeds=" + ",".join(str(x) for x in cfg.seeds))
    return lines
