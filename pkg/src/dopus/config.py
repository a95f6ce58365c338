"""TOML run configuration mapped onto the package's dataclasses.

Layout::

    [scan]                      # PipelineConfig fields
    segmenter = "classical"
    out_dir = "runs/demo"
    [scan.scenario]             # ScenarioConfig
    seed = 3
    dropout = [[20.0, 150.0, 0.15]]
    [scan.scenario.phantom]     # PhantomConfig
    [scan.tracker]              # TrackerParams
    [scan.reident]              # ReidentParams

    [ab]
    trials = 10

    [dataset]                   # phantom gen
    n_patients = 7

Relative paths are resolved against the config file's directory. Unknown
keys are errors.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .monitor import ReidentParams
from .phantom import PhantomConfig
from .pipeline import PipelineConfig, ScenarioConfig
from .tracker import TrackerParams

__all__ = ["DatasetConfig", "RunConfig", "build_dataclass", "load_config", "parse_config"]

_NESTED = {
    PipelineConfig: {"scenario": ScenarioConfig, "tracker": TrackerParams, "reident": ReidentParams},
    ScenarioConfig: {"phantom": PhantomConfig},
}


@dataclass
class DatasetConfig:
    """Virtual patients written by ``phantom gen``."""

    n_patients: int = 7
    sweeps_per_patient: int = 2
    length_mm: float = 120.0
    seed: int = 0
    dropout_prob: float = 0.5
    max_tilt: float = 10.0
    dropout_len: tuple = (5.0, 15.0)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


_NESTED[DatasetConfig] = {"phantom": PhantomConfig}


@dataclass
class RunConfig:
    scan: PipelineConfig = field(default_factory=PipelineConfig)
    ab_trials: int = 10
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    source: Path | None = None


def build_dataclass(cls, data: dict, where: str = ""):
    """Instantiate ``cls`` from a mapping, recursing into known nested sections."""
    if not isinstance(data, dict):
        raise ValueError(f"[{where or cls.__name__}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown key(s) in [{where or cls.__name__}]: {', '.join(unknown)}")
    kw = {}
    nested = _NESTED.get(cls, {})
    for k, v in data.items():
        if k in nested and v is not None:
            kw[k] = build_dataclass(nested[k], v, f"{where}.{k}" if where else k)
        elif isinstance(v, list) and k != "dropout":
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ValueError(f"[{where or cls.__name__}]: {e}") from None


def _resolve(base: Path, p):
    if p is None or p == "classical":
        return p
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def parse_config(data: dict, base_dir: str | Path = ".") -> RunConfig:
    base = Path(base_dir)
    unknown = sorted(set(data) - {"scan", "ab", "dataset"})
    if unknown:
        raise ValueError(f"unknown section(s): {', '.join(unknown)}")
    scan_d = dict(data.get("scan", {}))
    if "replay_path" in scan_d and "scenario" not in scan_d:
        scan_d["scenario"] = None
    scan = build_dataclass(PipelineConfig, scan_d, "scan")
    scan.segmenter = _resolve(base, scan.segmenter)
    scan.replay_path = _resolve(base, scan.replay_path)
    scan.out_dir = _resolve(base, scan.out_dir)
    ab = data.get("ab", {})
    if set(ab) - {"trials"}:
        raise ValueError("[ab] only accepts 'trials'")
    trials = int(ab.get("trials", 10))
    dataset = build_dataclass(DatasetConfig, data.get("dataset", {}), "dataset")
    return RunConfig(scan, trials, dataset)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    cfg = parse_config(data, path.parent)
    cfg.source = path
    return cfg
