"""Flat ``key = value`` experiment configuration files.

Keys are exactly the field names of :class:`TrainConfig`, the synthetic task
fields (``data_seed`` for the task seed) and the experiment-level fields
below. Lines starting with ``#`` are comments. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import SyntheticSpec
from .model import ConfigError
from .optim import TrainConfig


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_seed: Optional[int] = None
    source_csv: Optional[str] = None
    target_csv: Optional[str] = None
    csv_header: bool = False
    target_csv_labelled: bool = True
    eval_every: int = 50
    output_dir: str = "runs/default"
    export_embeddings: bool = False
    log_wall_clock: bool = False

    def synthetic_spec(self) -> SyntheticSpec:
        """Synthetic task settings with the seed resolved (``data_seed`` falls back to ``seed``)."""
        seed = self.train.seed if self.data_seed is None else self.data_seed
        return dataclasses.replace(self.data, seed=seed)

    def validate(self, check_paths: bool = True) -> None:
        self.train.validate()
        if self.source_csv is None:
            self.synthetic_spec().validate()
        if (self.source_csv is None) != (self.target_csv is None):
            raise ConfigError("source_csv and target_csv must be given together")
        if check_paths:
            for p in (self.source_csv, self.target_csv):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"data file not found: {p}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, train=dataclasses.replace(self.train), data=dataclasses.replace(self.data))
        for k, v in kw.items():
            set_key(cfg, k, v)
        return cfg


_EXPERIMENT_KEYS = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name not in ("train", "data")]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
_DATA_KEYS = [f.name for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"]


def known_keys() -> list:
    return _TRAIN_KEYS + _DATA_KEYS + _EXPERIMENT_KEYS


def _field_type(owner, name: str):
    hints = typing.get_type_hints(type(owner))
    return hints[name]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(tp, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, text)
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is tuple or origin is tuple:
        parts = [p.strip() for p in text.replace("[", "").replace("]", "").split(",") if p.strip()]
        return tuple(float(p) if any(ch in p for ch in ".eE") else int(p) for p in parts)
    return text


def set_key(cfg: ExperimentConfig, key: str, raw) -> None:
    if key == "seed":
        cfg.train.seed = int(raw)
        return
    for owner, keys in ((cfg.train, _TRAIN_KEYS), (cfg.data, _DATA_KEYS), (cfg, _EXPERIMENT_KEYS)):
        if key in keys:
            try:
                value = _coerce(_field_type(owner, key), raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            setattr(owner, key, value)
            return
    raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    cfg.train.__post_init__()
    cfg.data.__post_init__()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path))
    base = path.parent
    for attr in ("source_csv", "target_csv"):
        p = getattr(cfg, attr)
        if p is not None and not Path(p).is_absolute() and not Path(p).exists():
            setattr(cfg, attr, str(base / p))
    return cfg


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.train, key))}")
    for key in _DATA_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.data, key))}")
    for key in _EXPERIMENT_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"
