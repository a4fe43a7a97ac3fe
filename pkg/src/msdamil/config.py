"""Flat ``key = value`` run configuration shared by every command.

The file is UTF-8 text, one assignment per line, ``#`` starts a comment.
Keys are the union of the corpus and training settings plus a few paths
and run-level choices; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .data import ConfigError, CorpusConfig
from .train import MODES, TrainConfig

_RUN_KEYS = {
    "corpus_dir": str,
    "checkpoint_dir": str,
    "output_dir": str,
    "mode": str,
    "scale_list": tuple,
}


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in (CorpusConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            types[f.name] = _resolve(f.type)
    types.update(_RUN_KEYS)
    return types


def _resolve(annotation) -> type:
    text = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    for name, t in (("tuple", tuple), ("bool", bool), ("int", int), ("float", float), ("str", str)):
        if text.startswith(name):
            return t
    raise TypeError(f"unsupported config field type {annotation!r}")


KEY_TYPES = _field_types()


def _convert(key: str, raw: str):
    t = KEY_TYPES[key]
    raw = raw.strip()
    try:
        if t is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return t(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {t.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEY_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def parse_overrides(pairs: Iterable[str]) -> dict:
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in KEY_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


@dataclass
class RunConfig:
    corpus: CorpusConfig
    train: TrainConfig
    corpus_dir: str | None = None
    checkpoint_dir: str | None = None
    output_dir: str | None = None
    mode: str = "msdamil"
    scale_list: tuple[int, ...] = field(default_factory=tuple)

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def scales(self) -> list[int]:
        return list(self.scale_list) or list(range(1, self.corpus.scales + 1))

    def require(self, *keys: str) -> None:
        for key in keys:
            if getattr(self, key) in (None, ""):
                raise ConfigError(f"missing required key {key!r}")

    def path(self, key: str) -> Path:
        self.require(key)
        return Path(getattr(self, key))

    @classmethod
    def from_values(cls, values: Mapping) -> "RunConfig":
        corpus_keys = {f.name for f in dataclasses.fields(CorpusConfig)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        corpus = CorpusConfig(**{k: v for k, v in values.items() if k in corpus_keys})
        train = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
        run = cls(corpus, train, **{k: v for k, v in values.items() if k in _RUN_KEYS})
        run.validate()
        return run

    def validate(self) -> None:
        self.corpus.validate()
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if any(s < 1 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> RunConfig:
    """Read the file (if any), apply overrides, validate."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update(overrides or {})
    return RunConfig.from_values(values)
