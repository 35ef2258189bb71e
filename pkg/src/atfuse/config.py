"""Flat run configuration: ``section.key = value`` lines.

Three sections cover the whole run: ``model.*`` (architecture), ``loss.*``
(objective weights), ``train.*`` (optimisation). Values are parsed by the
declared type of the matching config field; unknown keys are rejected with
the offending name. ``--set section.key=value`` pairs overlay file values,
and every run writes back the fully resolved form so the snapshot next to
the outputs replays the run.
"""

from __future__ import annotations

import os
from dataclasses import fields, replace
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A config line, key, or value cannot be used."""


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}


def _scalar_fields(cls) -> dict[str, object]:
    """Field name -> default value, skipping nested config dataclasses."""
    return {f.name: f.default for f in fields(cls) if f.name not in ("loss", "model")}


def _known_keys() -> dict[str, type]:
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name in ("loss", "model"):
                continue
            keys["%s.%s" % (section, f.name)] = cls
    return keys


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``section.key`` -> string value mapping; format errors name the line."""
    known = _known_keys()
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError("%s:%d: expected key = value, got %r" % (source, lineno, stripped))
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError("%s:%d: unknown config key %r" % (source, lineno, key))
        values[key] = value
    return values


def load_config_file(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found: %s" % path)
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def apply_overrides(values: dict[str, str], sets: list[str]) -> dict[str, str]:
    """Overlay ``--set section.key=value`` pairs on top of file values."""
    known = _known_keys()
    merged = dict(values)
    for item in sets:
        if "=" not in item:
            raise ConfigError("--set needs section.key=value, got %r" % item)
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError("--set: unknown config key %r" % key)
        merged[key] = value
    return merged


def _convert(key: str, raw: str, example) -> object:
    try:
        if isinstance(example, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError("not a boolean")
        if isinstance(example, int):
            return int(raw)
        if isinstance(example, float):
            return float(raw)
        if isinstance(example, tuple):
            if not raw:
                return ()
            return tuple(int(tok.strip()) for tok in raw.split(","))
    except ValueError as exc:
        raise ConfigError("bad value for %s: %r (%s)" % (key, raw, exc)) from exc
    raise ConfigError("no parser for config key %s" % key)


def build_train_config(values: dict[str, str]) -> TrainConfig:
    """Materialise a TrainConfig (with nested model/loss) from raw strings."""
    kwargs: dict[str, dict] = {"model": {}, "loss": {}, "train": {}}
    examples = {section: _scalar_fields(cls) for section, cls in _SECTIONS.items()}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        kwargs[section][name] = _convert(key, raw, examples[section][name])
    try:
        model = ModelConfig(**kwargs["model"])
        loss = LossConfig(**kwargs["loss"])
        return TrainConfig(model=model, loss=loss, **kwargs["train"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def effective_text(cfg: TrainConfig) -> str:
    """Canonical snapshot of every key, section by section."""
    lines = []
    for section, obj in (("model", cfg.model), ("loss", cfg.loss), ("train", cfg)):
        for f in fields(type(obj)):
            if f.name in ("loss", "model"):
                continue
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                text = str(value).lower()
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append("%s.%s = %s" % (section, f.name, text))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Reseed both the sampler and the weight init."""
    return replace(cfg, seed=seed, model=replace(cfg.model, seed=seed))
