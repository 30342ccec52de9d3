"""Declarative run configuration: one document, validated up front, embedded in every artifact."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .control import ControllerGains
from .deploy import EpisodeConfig
from .operator import TaskLayout
from .rnn import TrainHyper
from .sim import ManipulatorParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSettings:
    contact_stiffness: float = 2000.0
    contact_damping: float = 5.0
    friction_viscous: float = 0.5
    friction_coulomb: float = 0.2
    slip_velocity: float = 1e-3
    on_ruler_tolerance: float = 0.002


@dataclass(frozen=True)
class ScriptSettings:
    hand_stiffness: float = 200.0
    hand_damping: float = 4.0
    press_force: float = 0.8
    aim_depth: float = 0.003
    durations: tuple[float, float, float, float] = (1.5, 1.5, 0.3, 1.5)
    start_jitter: float = 0.005


@dataclass(frozen=True)
class CollectSettings:
    inclinations: tuple[float, ...] = (0.0, 30.0, 60.0)
    per_inclination: int = 5
    retries: int = 5
    corpus: str = "corpus.demo"


@dataclass(frozen=True)
class NormSettings:
    source: str = "corpus"  # "corpus" (data min/max + margin) or "table"
    margin: float = 0.1

    def __post_init__(self):
        if self.source not in ("corpus", "table"):
            raise ConfigError("normalization.source must be 'corpus' or 'table'")


@dataclass(frozen=True)
class EvalSettings:
    inclinations: tuple[float, ...] = (0.0, 30.0, 60.0, 15.0, 45.0)
    seeds: int = 20
    baseline: bool = True  # also run untrained random networks
    m1_unclamped: bool = True  # also run model 1 without the torque clamp
    protractor_radius: float = 0.05
    protractor_reference_inclination: float = 30.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    out: str = "run"
    manipulator: ManipulatorParams = field(default_factory=ManipulatorParams)
    gains: ControllerGains = field(default_factory=ControllerGains)
    world: WorldSettings = field(default_factory=WorldSettings)
    layout: TaskLayout = field(default_factory=TaskLayout)
    script: ScriptSettings = field(default_factory=ScriptSettings)
    collect: CollectSettings = field(default_factory=CollectSettings)
    normalization: NormSettings = field(default_factory=NormSettings)
    train: TrainHyper = field(default_factory=TrainHyper)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def provenance(self) -> dict:
        """Everything that can change a result; where artifacts go and how many workers ran does not."""
        d = self.to_dict()
        del d["out"], d["jobs"]
        return d


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(tp, value, where):
    """Convert JSON/YAML scalars and lists into the annotated field type."""
    s = str(tp)
    if value is None:
        if "None" in s:
            return None
        raise ConfigError(f"{where}: null not allowed")
    if s.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = s[len("tuple["):-1]
        if inner.startswith("tuple"):
            return tuple(tuple(float(v) for v in row) for row in value)
        if "int" in inner and "float" not in inner:
            return tuple(int(v) for v in value)
        return tuple(float(v) for v in value)
    if "bool" in s:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if "float" in s:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if "int" in s:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if "str" in s:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kw[name] = _coerce(f.type, value, f"{where}.{name}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "config")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values over defaults, then ``overrides`` (dotted keys) over both."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        data = data or {}
    for dotted, value in (overrides or {}).items():
        node = data
        *head, last = dotted.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[last] = value
    return from_dict(data)
