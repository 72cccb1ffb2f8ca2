"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys belong either to
:class:`ModelConfig` or to :class:`TrainConfig`; ``configs/reference.conf``
lists every key with its default. Environment variables are never read.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_defaults = dataclasses.asdict(ModelConfig())
    train_defaults = dataclasses.asdict(TrainConfig())
    model_kw, train_kw = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in model_defaults and key not in train_defaults:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        # ``seed`` exists in both and seeds init and shuffling alike
        if key in model_defaults:
            model_kw[key] = _coerce(key, value, model_defaults[key])
        if key in train_defaults:
            train_kw[key] = _coerce(key, value, train_defaults[key])
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    return parse_config(Path(path).read_text())


def render_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    model_defaults = dataclasses.asdict(model_cfg)
    lines = ["# model"]
    for k, v in dataclasses.asdict(model_cfg).items():
        lines.append(f"{k} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines.append("# training")
    for k, v in dataclasses.asdict(train_cfg).items():
        if k not in model_defaults:
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
