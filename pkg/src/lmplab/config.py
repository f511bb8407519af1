"""Run configuration: INI file sections, typed values, flag overrides, and a digest.

Sections and keys::

    [grid]      n, avg_degree, limit_scale, seed, case_path
    [data]      count, bound_jitter, cost_jitter, splits, seed, problem_seed
    [model]     kind, dims, K, activation
    [train]     lr, beta1, beta2, eps, batch_size, max_epochs, patience,
                lambda_reg, seed, early_stopping
    [transfer]  max_lines, finetune_epochs, seeds

Lists are comma separated. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import jsonio
from .dataset import DataConfig
from .errors import InvalidConfig
from .training import TrainConfig


@dataclass
class GridSection:
    n: int = 30
    avg_degree: float = 2.5
    limit_scale: float = 1.5
    seed: Optional[int] = None
    case_path: Optional[str] = None


@dataclass
class DataSection:
    count: int = 5000
    bound_jitter: float = 0.2
    cost_jitter: float = 0.2
    splits: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    problem_seed: int = 0

    def to_config(self) -> DataConfig:
        return DataConfig(self.count, self.bound_jitter, self.cost_jitter, tuple(self.splits), self.seed,
                          self.problem_seed)


# hidden per-node widths when [model] dims is not given
DEFAULT_HIDDEN = {"gnn": (32, 32), "fcnn": (8, 8), "gidnn": (8, 8)}


@dataclass
class ModelSection:
    kind: str = "gnn"
    dims: Optional[tuple] = None
    K: int = 2
    activation: str = "relu"

    def resolved_dims(self, d_in: int) -> tuple:
        if self.dims is not None:
            if self.dims[0] != d_in:
                raise InvalidConfig(f"model.dims starts with {self.dims[0]} but data has {d_in} features")
            return tuple(self.dims)
        return (d_in,) + DEFAULT_HIDDEN[self.kind] + (1,)


@dataclass
class TransferSection:
    max_lines: int = 2
    finetune_epochs: int = 5
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferSection = field(default_factory=TransferSection)

    def as_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(jsonio.dumps(self.as_dict()).encode("utf-8")).hexdigest()


def _field_types(section) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    out = {}
    for f in fields(section):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        t = t.replace("Optional[", "").rstrip("]")
        out[f.name] = hints[t]
    return out


_LIST_TYPES = {("data", "splits"): float, ("model", "dims"): int, ("transfer", "seeds"): int}


def _coerce(section: str, key: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is tuple:
            item = _LIST_TYPES[(section, key)]
            return tuple(item(v) for v in raw.replace(" ", "").split(",") if v)
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise InvalidConfig(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def set_value(cfg: RunConfig, section: str, key: str, value) -> None:
    """Assign ``section.key``; strings are parsed, other values are stored as given."""
    if not hasattr(cfg, section):
        raise InvalidConfig(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    types = _field_types(sec)
    if key not in types:
        raise InvalidConfig(f"unknown key {section}.{key}")
    if isinstance(value, str) and types[key] is not str:
        value = _coerce(section, key, types[key], value)
    setattr(sec, key, value)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``(section, key, value)`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InvalidConfig(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                set_value(cfg, section, key, raw)
    for section, key, value in overrides:
        if value is not None:
            set_value(cfg, section, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    g = cfg.grid
    if g.case_path is not None and not Path(g.case_path).is_file():
        raise InvalidConfig(f"grid.case_path {g.case_path} does not exist")
    if cfg.model.kind not in DEFAULT_HIDDEN:
        raise InvalidConfig(f"model.kind must be one of {sorted(DEFAULT_HIDDEN)}")
    if cfg.transfer.max_lines not in (0, 1, 2):
        raise InvalidConfig("transfer.max_lines must be 0, 1 or 2")
    if not 1 <= cfg.transfer.finetune_epochs <= 10:
        raise InvalidConfig("transfer.finetune_epochs must lie in [1, 10]")
    cfg.data.to_config()
    TrainConfig(**dataclasses.asdict(cfg.train))
