"""Run configuration: a nested TOML file mapped onto the component configs.

Every section is optional; unknown sections or keys are rejected so that a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import RewardWeights
from .impact import LAG_GRID, RETAIN_R2, ImpactParams
from .mapelites import QDConfig
from .marketdata import SynthConfig
from .ppo import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    bars: str = ""
    calibration: str = ""


@dataclass
class CalibrationSection:
    lags: tuple = LAG_GRID
    forms: tuple = ("linear", "sqrt")
    folds: int = 5
    threshold: float = RETAIN_R2


@dataclass
class OrdersSection:
    n_train: int = 2000
    n_test: int = 500
    train_from: str = ""
    train_to: str = ""
    test_from: str = ""
    test_to: str = ""
    ehv_pct_range: tuple = (0.5, 20.0)
    horizon_range: tuple = (1, 390)
    side_prob: float = 0.5


@dataclass
class EvaluateSection:
    strategies: tuple = ("twap", "vwap", "pov", "random")


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    orders: OrdersSection = field(default_factory=OrdersSection)
    reward: RewardWeights = field(default_factory=RewardWeights)
    ppo: TrainConfig = field(default_factory=TrainConfig)
    qd: QDConfig = field(default_factory=QDConfig)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if dataclasses.is_dataclass(v):
        return _plain(dataclasses.asdict(v))
    return v


def _build(cls, values, where):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    defaults = {f.name: f.default for f in known.values() if f.default is not dataclasses.MISSING}
    kwargs = {}
    for k, v in values.items():
        default = defaults.get(k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        elif k == "planted_impact" and isinstance(v, dict):
            v = _build(ImpactParams, v, f"{where}.{k}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(doc):
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, f in sections.items():
        if name not in doc:
            continue
        val = doc[name]
        if name in ("seed", "workers"):
            if not isinstance(val, int):
                raise ConfigError(f"{name} must be an integer")
            kwargs[name] = val
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(type(f.default_factory()), val, name)
    cfg = RunConfig(**kwargs)
    for sec in (cfg.synth, cfg.ppo, cfg.qd):
        try:
            sec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return config_from_dict(doc)
