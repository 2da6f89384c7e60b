"""Experiment configuration read from INI files.

Sections:

``[paths]``  ``srm``, ``demos``, ``out``
``[env]``    ``size``, ``max_steps``, ``binary_reward``
``[train]``  any :class:`~srmkit.inference.TrainConfig` field, plus ``preset`` (``desk`` or ``paper``)
``[mode]``   ``mode`` (``algo1`` or ``baseline``), ``constraint``, ``sign_only``
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .gridworld import GridConfig
from .inference import TrainConfig

MODES = ("algo1", "baseline")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    srm: Optional[Path] = None
    demos: Optional[Path] = None
    out: Path = Path("runs")
    size: int = 6
    max_steps: Optional[int] = None
    binary_reward: bool = False
    mode: str = "algo1"
    preset: str = "desk"
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def grid(self) -> GridConfig:
        return GridConfig(size=self.size, max_steps=self.max_steps, binary_reward=self.binary_reward)

    def train_config(self, **extra) -> TrainConfig:
        kw = dict(self.train)
        kw.update(extra)
        try:
            return TrainConfig.desk(**kw) if self.preset == "desk" else TrainConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def check(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        for name in ("srm", "demos"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_TRAIN_TYPES = typing.get_type_hints(TrainConfig)
_BY_LOWER = {n.lower(): n for n in _TRAIN_FIELDS}  # configparser lowercases keys


def _convert(name: str, raw: str):
    if name not in _TRAIN_FIELDS:
        raise ConfigError(f"unknown training option {name!r}")
    tp = _TRAIN_TYPES[name]
    if typing.get_origin(tp) is typing.Union:
        if raw.strip().lower() in ("", "none"):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        return tp(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = ExperimentConfig()
    try:
        if cp.has_section("paths"):
            sec = cp["paths"]
            cfg.srm = Path(sec["srm"]) if "srm" in sec else None
            cfg.demos = Path(sec["demos"]) if "demos" in sec else None
            cfg.out = Path(sec.get("out", str(cfg.out)))
        if cp.has_section("env"):
            sec = cp["env"]
            cfg.size = sec.getint("size", cfg.size)
            ms = sec.get("max_steps", "")
            cfg.max_steps = int(ms) if ms.strip() else None
            cfg.binary_reward = sec.getboolean("binary_reward", cfg.binary_reward)
        if cp.has_section("mode"):
            sec = cp["mode"]
            cfg.mode = sec.get("mode", cfg.mode)
            if "constraint" in sec:
                cfg.train["use_constraint"] = sec.getboolean("constraint")
            if "sign_only" in sec:
                cfg.train["sign_only"] = sec.getboolean("sign_only")
        if cp.has_section("train"):
            for k, v in cp["train"].items():
                if k == "preset":
                    cfg.preset = v.strip()
                else:
                    name = _BY_LOWER.get(k, k)
                    cfg.train[name] = _convert(name, v)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path}: {e}") from None
    cfg.check()
    return cfg


def seed_from_env(default: int = 0) -> int:
    raw = os.environ.get("SRMKIT_SEED")
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SRMKIT_SEED must be an integer, got {raw!r}") from None
