"""Layered run configuration: defaults <- config file <- flags, with the
MOECTL_SEED environment variable as a global seed override."""

from __future__ import annotations

import configparser
import os
from dataclasses import fields

from .data import FilterPolicy
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "MOECTL_SEED"


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean {value!r}")
    return target_type(value)


def _load_section(parser, section: str, cls):
    kwargs = {}
    valid = {f.name: f.type for f in fields(cls)}
    types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
    if parser is not None and parser.has_section(section):
        for key, value in parser.items(section):
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                kwargs[key] = _coerce(value, types[key])
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"[{section}] {key}: {e}") from e
    return cls(**kwargs)


class RunConfig:
    """Merged view of model, training, filter, and corpus settings."""

    def __init__(self, path=None):
        parser = None
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
        self.model = _load_section(parser, "model", ModelConfig)
        self.train = _load_section(parser, "train", TrainConfig)
        self.filter = _load_section(parser, "filter", FilterPolicy)
        self.corpus = {"per_family": 100, "seed": 0}
        if parser is not None and parser.has_section("corpus"):
            for key, value in parser.items("corpus"):
                if key not in self.corpus:
                    raise ConfigError(f"unknown key {key!r} in [corpus]")
                self.corpus[key] = int(value)
        seed_env = os.environ.get(SEED_ENV)
        if seed_env is not None:
            try:
                seed = int(seed_env)
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV} must be an integer") from e
            self.apply_seed(seed)

    def apply_seed(self, seed: int):
        self.model.seed = seed
        self.train.seed = seed
        self.corpus["seed"] = seed
