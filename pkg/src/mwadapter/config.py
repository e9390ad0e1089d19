"""Experiment configuration: TOML in, TOML snapshot out.

Every field has a default, so an empty file (or no file) is a valid config.
``MWA_SEED`` in the environment overrides ``seed``.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field

from .adapters import AdapterConfig
from .multiway import BackboneConfig
from .retrieval import TrainHyper

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 7
    n_examples: int = 256
    n_concepts: int = 8
    noise: float = 0.1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    data: DataConfig = field(default_factory=DataConfig)

    def train_hyper(self):
        """Training hyperparameters with the experiment seed applied."""
        return dataclasses.replace(self.train, seed=self.seed)


_SECTIONS = {"backbone": BackboneConfig, "adapter": AdapterConfig, "train": TrainHyper, "data": DataConfig}


def _coerce(section, name, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if default is not None and not isinstance(value, type(default)):
        raise ConfigError(f"[{section}] {name}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, section, table):
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    return cls(**kwargs)


def from_dict(raw):
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a table")
            setattr(cfg, key, _build(_SECTIONS[key], key, value))
        elif key in ("seed", "out_dir"):
            cfg_default = getattr(ExperimentConfig(), key)
            setattr(cfg, key, _coerce("top", key, value, cfg_default))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return cfg


def loads(text, env=None):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        # message carries "(at line L, column C)"
        raise ConfigError(f"config parse error: {e}") from None
    cfg = from_dict(raw)
    env = os.environ if env is None else env
    if env.get("MWA_SEED"):
        try:
            cfg.seed = int(env["MWA_SEED"])
        except ValueError:
            raise ConfigError(f"MWA_SEED must be an integer, got {env['MWA_SEED']!r}") from None
    return cfg


def load(path=None, env=None):
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return loads(text, env)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {v!r} to TOML")


def dumps(cfg):
    lines = [f"seed = {cfg.seed}", f"out_dir = {_toml_value(cfg.out_dir)}"]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
