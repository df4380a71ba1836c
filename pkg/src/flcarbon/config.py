"""Run and sweep configuration: dataclasses plus a strict dict/YAML loader.

Units live in the key names: ``_j`` Joule, ``_bit_per_j`` bit/Joule,
``_kg_per_kwh`` kgCO2-eq/kWh, ``_kg`` kgCO2-eq, ``_s`` seconds.
"""

from __future__ import annotations

import dataclasses
import itertools
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .compression import CompressionPolicy
from .energy import DeviceEnergy, LinkEfficiencies, ServerEnergy
from .model import OptimizerConfig

PROTOCOLS = ("fa", "cfa")
TOPOLOGIES = ("fully_connected", "ring", "random_regular")
SWEEP_AXES = ("delta", "n_bits", "ee_com", "i_0", "i_k", "protocol")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "fully_connected"
    degree: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"kind must be one of {TOPOLOGIES}, got {self.kind!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    hidden_dims: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic Gaussian blobs, or a CSV file when ``csv_path`` is set."""

    n_classes: int = 10
    input_dim: int = 20
    samples_per_class: int = 375
    class_separation: float = 1.0
    noise_sigma: float = 1.0
    val_fraction: float = 0.2
    csv_path: str | None = None

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1 or self.samples_per_class < 1:
            raise ValueError("input_dim and samples_per_class must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class CarbonSpec:
    device_intensity_kg_per_kwh: float = 0.449
    server_intensity_kg_per_kwh: float = 0.449
    schedule_csv: str | None = None
    round_duration_s: float = 60.0
    start_time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.device_intensity_kg_per_kwh <= 0 or self.server_intensity_kg_per_kwh <= 0:
            raise ValueError("carbon intensities must be positive")
        if self.round_duration_s <= 0:
            raise ValueError("round_duration_s must be positive")


@dataclass(frozen=True)
class StoppingSpec:
    max_rounds: int | None = 100
    carbon_budget_kg: float | None = None
    target_accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.max_rounds is None and self.carbon_budget_kg is None and self.target_accuracy is None:
            raise ValueError("at least one stopping condition is required")
        if self.max_rounds is not None and self.max_rounds < 0:
            raise ValueError("max_rounds must be non-negative")
        if self.carbon_budget_kg is not None and self.carbon_budget_kg < 0:
            raise ValueError("carbon_budget_kg must be non-negative")
        if self.target_accuracy is not None and not 0.0 <= self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must be in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one simulated training run.

    ``accounting_n_params`` overrides the parameter count used for bit and energy
    accounting (e.g. 59500 to charge a LeNet-5 sized payload while training a
    toy model); ``None`` charges the trained model's own size.
    """

    protocol: str
    seed: int
    n_devices: int = 10
    gamma: float = 0.01
    accounting_n_params: int | None = None
    topology: TopologySpec = field(default_factory=TopologySpec)
    compression: CompressionPolicy = field(default_factory=CompressionPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    device_energy: DeviceEnergy = field(default_factory=DeviceEnergy)
    server_energy: ServerEnergy = field(default_factory=ServerEnergy)
    links: LinkEfficiencies = field(default_factory=LinkEfficiencies)
    carbon: CarbonSpec = field(default_factory=CarbonSpec)
    stopping: StoppingSpec = field(default_factory=StoppingSpec)

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.n_devices < 1:
            raise ValueError("n_devices must be >= 1")
        if self.protocol == "cfa" and self.n_devices < 2:
            raise ValueError("cfa needs at least 2 devices")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.accounting_n_params is not None and self.accounting_n_params < 1:
            raise ValueError("accounting_n_params must be positive")

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SweepSpec:
    base: RunConfig
    axes: dict[str, list] = field(default_factory=dict)
    repetitions: int = 1
    max_grid_points: int = 10_000

    def __post_init__(self) -> None:
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {name!r}; allowed: {SWEEP_AXES}")
            if not isinstance(values, list) or not values:
                raise ValueError(f"axis {name!r} needs a non-empty list of values")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.n_cells > self.max_grid_points:
            raise ValueError(f"sweep has {self.n_cells} cells, cap is {self.max_grid_points}")

    @property
    def n_cells(self) -> int:
        n = self.repetitions
        for values in self.axes.values():
            n *= len(values)
        return n

    def grid(self) -> list[dict[str, Any]]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]


def apply_axes(base: RunConfig, point: dict[str, Any]) -> RunConfig:
    cfg = base
    for name, value in point.items():
        if name == "delta":
            cfg = cfg.replace(compression=dataclasses.replace(cfg.compression, delta=float(value), identity=False))
        elif name == "n_bits":
            cfg = cfg.replace(compression=dataclasses.replace(cfg.compression, n_bits=int(value), identity=False))
        elif name == "ee_com":
            cfg = cfg.replace(links=LinkEfficiencies.uniform(float(value)))
        elif name == "i_0":
            cfg = cfg.replace(carbon=dataclasses.replace(cfg.carbon, server_intensity_kg_per_kwh=float(value)))
        elif name == "i_k":
            cfg = cfg.replace(carbon=dataclasses.replace(cfg.carbon, device_intensity_kg_per_kwh=float(value)))
        elif name == "protocol":
            cfg = cfg.replace(protocol=str(value))
        else:
            raise ValueError(f"unknown sweep axis {name!r}")
    return cfg


# ---------------------------------------------------------------------------
# Strict loading
# ---------------------------------------------------------------------------


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (item_tp, _) = typing.get_args(tp)
        return tuple(_convert(item_tp, v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return {str(k): list(v) if isinstance(v, (list, tuple)) else v for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls: type, data: Any, path: str = "") -> Any:
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys by their full path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {_join(path, str(key))}")
    kwargs = {}
    for name, f in known.items():
        key_path = _join(path, name)
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], key_path)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required key {key_path}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def to_dict(obj: Any) -> Any:
    """Plain nested dict with every field present, including defaults."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def read_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_run_config(path: str | Path) -> RunConfig:
    return from_dict(RunConfig, read_document(path))


def load_sweep_spec(path: str | Path) -> SweepSpec:
    return from_dict(SweepSpec, read_document(path))


def load_any(path: str | Path) -> RunConfig | SweepSpec:
    """A document with a top-level ``base`` key is a sweep, otherwise a single run."""
    data = read_document(path)
    return from_dict(SweepSpec if "base" in data else RunConfig, data)


def dump_yaml(obj: Any) -> str:
    return yaml.safe_dump(to_dict(obj), sort_keys=False, default_flow_style=False)
