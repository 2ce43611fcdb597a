"""Run configuration files and the bundled benchmark definitions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import DatasetError, DatasetSpec
from .train import ConfigError, TrainConfig

RUN_FIELDS = ("data", "train", "dataset_dir", "out_dir")


@dataclass
class RunConfig:
    """Everything a command needs: dataset spec, training config, paths.

    Serialized as ``{"data": {...}, "train": {...}, "dataset_dir": ..., "out_dir": ...}``.
    The CAM threshold lives in ``train.threshold``.
    """

    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset_dir: str | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict(),
                "dataset_dir": self.dataset_dir, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d: dict, source: str = "config") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        unknown = sorted(set(d) - set(RUN_FIELDS))
        if unknown:
            raise ConfigError(f"{source}: unknown field(s): {', '.join(unknown)}")
        try:
            data = DatasetSpec.from_dict(d.get("data") or {})
        except (DatasetError, TypeError) as exc:
            raise ConfigError(f"{source}: field 'data': {exc}") from exc
        try:
            train = TrainConfig.from_dict(d.get("train") or {})
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{source}: field 'train': {exc}") from exc
        return cls(data, train, d.get("dataset_dir"), d.get("out_dir"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_json(text: str, source: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return RunConfig.from_dict(parse_json(p.read_text(), str(p)), str(p))


def benchmark_names() -> list[str]:
    root = resources.files("subcam") / "benchmarks"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_benchmark(name: str = "bench-v1") -> RunConfig:
    """A bundled, versioned benchmark definition (dataset spec + training config)."""
    res = resources.files("subcam") / "benchmarks" / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"unknown benchmark {name!r}; available: {', '.join(benchmark_names())}")
    return RunConfig.from_dict(parse_json(res.read_text(), name), name)
