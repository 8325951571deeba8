"""Experiment configuration: one nested dataclass, loadable from YAML.

Precedence, lowest to highest: dataclass defaults, config file, environment
variables with prefix ``RECUNLEARN_``, command-line flags. Nested fields use a
double underscore in the environment, e.g. ``RECUNLEARN_MODEL__EMBED_DIM=32``.
Values from the environment are parsed as YAML scalars.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import yaml

from .dataset import SplitSpec
from .influence import SolverConfig
from .mio import MioConfig
from .model import ModelHyper
from .seeding import derive_seed
from .synthetic import SyntheticConfig
from .unlearner import Strategy

ENV_PREFIX = "RECUNLEARN_"
CONFIG_SCHEMA = "recunlearn.config/1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    # path=None means: generate synthetic data from ``synthetic``
    path: Optional[str] = None
    format: str = "ml1m"
    min_interactions: int = 5
    synthetic: SyntheticConfig = SyntheticConfig(
        num_users=500, num_items=1000, min_per_user=6, max_per_user=16, rating_noise=1.5)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    split: SplitSpec = SplitSpec()
    model: ModelHyper = ModelHyper(embed_dim=16, learning_rate=0.01, epochs=300)
    solver: SolverConfig = SolverConfig()
    mio: MioConfig = MioConfig(learning_rate=0.05)
    strategies: tuple = ("retrain", "if_full", "scif")
    alphas: tuple = (5.0,)
    repetitions: int = 5
    ks: tuple = (5, 10, 15, 20)
    cka_m: int = 3
    cka_alpha: float = 10.0
    retrain_seed_mode: str = "fresh"
    jobs: int = 1
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        for s in self.strategies:
            Strategy(s)
        if not self.alphas or any(not 0 < a <= 100 for a in self.alphas):
            raise ConfigError("alphas must be non-empty and within (0, 100]")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.cka_m < 2:
            raise ConfigError("cka_m must be >= 2: relative CKA needs a pairwise denominator")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def seeds(self) -> dict:
        """Every stage seed, derived from the global seed."""
        return {
            "split": derive_seed(self.seed, "split") % 2 ** 32,
            "synthetic": derive_seed(self.seed, "synthetic") % 2 ** 32,
            "model": [derive_seed(self.seed, "model", r) % 2 ** 32 for r in range(self.repetitions)],
            "request": [derive_seed(self.seed, "request", r) % 2 ** 32 for r in range(self.repetitions)],
            "mio": [derive_seed(self.seed, "mio", r) % 2 ** 32 for r in range(self.repetitions)],
            "cka": [derive_seed(self.seed, "cka", r) % 2 ** 32 for r in range(self.repetitions)],
        }

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **_plain(asdict(self))}


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a nested mapping, rejecting unknown keys."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known) - {"schema"}
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in values.items():
        if name == "schema":
            continue
        current = getattr(defaults, name)
        if is_dataclass(current):
            if value is not None and not isinstance(value, dict):
                raise ConfigError(f"{where}{name}: expected a mapping, got {type(value).__name__}")
            merged = {**_plain(asdict(current)), **(value or {})}
            kwargs[name] = _build(type(current), merged, f"{where}{name}.")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _set_path(tree: dict, path: list[str], value) -> None:
    for key in path[:-1]:
        tree = tree.setdefault(key, {})
    tree[path[-1]] = value


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if key.startswith(ENV_PREFIX):
            path = key[len(ENV_PREFIX):].lower().split("__")
            _set_path(out, path, yaml.safe_load(raw))
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> ExperimentConfig:
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        tree = yaml.safe_load(path.read_text()) or {}
    tree = _merge(tree, env_overrides(environ))
    tree = _merge(tree, overrides or {})
    return _build(ExperimentConfig, tree)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
