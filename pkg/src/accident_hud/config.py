"""Run configuration: one file, one section per command, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ._io import atomic_write_text


@dataclass
class ClusterSection:
    input_csv: str = "collisions.csv"
    epsilon: float = 0.0003
    min_points: int = 50
    k_distance_k: Optional[int] = None


@dataclass
class FetchSection:
    mock_dir: Optional[str] = None
    api_key_env: str = "STREETVIEW_API_KEY"
    fov: Optional[float] = None
    base_heading: float = 0.0
    workers: int = 4
    rate_per_s: Optional[float] = None
    split_fracs: list = field(default_factory=lambda: [0.7, 0.2, 0.1])


@dataclass
class TrainSection:
    backbone: str = "tiny"
    pretrained: bool = False
    variant: str = "c"
    compression_ratio: int = 16
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 0.001
    momentum: float = 0.9
    mode: str = "full"


@dataclass
class ExplainSection:
    methods: list = field(default_factory=lambda: ["gradcam", "gradcampp", "scorecam"])
    layer: str = "backbone"
    split: str = "test"
    max_images: Optional[int] = None
    tau: float = 0.5
    road_noise: float = 0.0
    inverse_thresholds: list = field(default_factory=lambda: [25])
    road_thresholds: list = field(default_factory=lambda: [25, 10, 20, 40, 60, 80])


@dataclass
class EvaluateSection:
    saliency_dir: Optional[str] = None
    road_average: list = field(default_factory=lambda: [20, 40, 60, 80])


@dataclass
class SimulateSection:
    scenario_file: str = "scenario.yaml"


@dataclass
class MonitorSection:
    trace_csv: str = "trace.csv"
    hotspots_csv: Optional[str] = None
    radius_m: float = 200.0
    hysteresis_m: float = 0.0


@dataclass
class RunConfig:
    workdir: str = "run"
    seed: int = 0
    cluster: ClusterSection = field(default_factory=ClusterSection)
    fetch: FetchSection = field(default_factory=FetchSection)
    train: TrainSection = field(default_factory=TrainSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    monitor: MonitorSection = field(default_factory=MonitorSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown config key(s) in {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}" if where else key)
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML/JSON config and apply ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(raw)
    return from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    atomic_write_text(path, yaml.safe_dump(cfg.to_dict(), sort_keys=True))
