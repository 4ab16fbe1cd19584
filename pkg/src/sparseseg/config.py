"""Run configuration: a YAML file mapped onto nested dataclasses.

Unknown keys are rejected so that typos fail loudly. See ``configs/default.yaml``
for a fully populated example and the README for the schema.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from sparseseg.augment import GlobalAugRanges, MixPolicy
from sparseseg.errors import InvalidInputError
from sparseseg.ingest import SynthSceneConfig
from sparseseg.segmentor import SegmentorConfig
from sparseseg.sparse.dataflows import DATAFLOWS, DEFAULT_GROUP_SIZE
from sparseseg.tta import TTAConfig


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" | "kitti"
    kitti_root: str | None = None
    train_sequences: tuple[int, ...] = (0,)
    eval_sequences: tuple[int, ...] = (8,)
    label_map: str | None = None  # YAML remap; bundled SemanticKITTI map when unset
    synthetic: SynthSceneConfig = field(default_factory=SynthSceneConfig)
    train_scenes: int = 8
    eval_scenes: int = 4
    eval_seed_offset: int = 1000  # held-out scenes use seeds base + offset + k


@dataclass(frozen=True)
class AugmentConfig:
    global_aug: bool = True
    ranges: GlobalAugRanges = field(default_factory=GlobalAugRanges)
    mix: MixPolicy = field(default_factory=lambda: MixPolicy(prob=0.5))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    augment: bool = True
    policy: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint: str = "model.ckpt"  # relative paths resolve against out_dir


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = "model.ckpt"  # relative paths resolve against out_dir
    tta: TTAConfig = field(default_factory=TTAConfig)


@dataclass(frozen=True)
class BenchConfig:
    dataflows: tuple[str, ...] = DATAFLOWS  # or ("auto",)
    repeats: int = 5
    scenes: int = 2
    kernel_size: int = 3
    stride: int = 1
    submanifold: bool = True
    c_in: int = 16
    c_out: int = 16
    group_size: int = DEFAULT_GROUP_SIZE
    train_steps: int = 3  # timed train steps per dataflow (Iter/s); 0 disables
    tolerance: float = 1e-5


@dataclass(frozen=True)
class PreviewConfig:
    operator: str = "lasermix"  # lasermix | polarmix | frustummix
    axis: str = "inclination"
    bands: int = 4
    sector_start: float | None = None
    sector_width: float = np.pi / 2


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1  # 1 = deterministic single-threaded mode
    out_dir: str = "out"
    format: str = "json"  # json | csv
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    segmentor: SegmentorConfig = field(default_factory=SegmentorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    preview: PreviewConfig = field(default_factory=PreviewConfig)

    def validate(self, check_paths: bool = True) -> RunConfig:
        if self.threads < 1:
            raise InvalidInputError("threads must be >= 1")
        if self.format not in ("json", "csv"):
            raise InvalidInputError(f"unknown report format {self.format!r}")
        if self.bench.repeats < 1:
            raise InvalidInputError("bench.repeats must be >= 1")
        if self.bench.scenes < 1:
            raise InvalidInputError("bench.scenes must be >= 1")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise InvalidInputError("train.steps must be >= 0 and batch_size >= 1")
        bad = set(self.bench.dataflows) - set(DATAFLOWS) - {"auto"}
        if bad or not self.bench.dataflows:
            raise InvalidInputError(f"unknown dataflows {sorted(bad)}; choose from {DATAFLOWS} or auto")
        if self.dataset.source not in ("synthetic", "kitti"):
            raise InvalidInputError(f"unknown dataset source {self.dataset.source!r}")
        if self.preview.operator not in ("lasermix", "polarmix", "frustummix"):
            raise InvalidInputError(f"unknown preview operator {self.preview.operator!r}")
        if check_paths and self.dataset.source == "kitti":
            if not self.dataset.kitti_root or not Path(self.dataset.kitti_root).is_dir():
                raise InvalidInputError(f"kitti_root {self.dataset.kitti_root!r} does not exist")
        if check_paths and self.dataset.label_map and not Path(self.dataset.label_map).is_file():
            raise InvalidInputError(f"label map {self.dataset.label_map!r} does not exist")
        return self

    def to_dict(self) -> dict:
        return _plain(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, SegmentorConfig):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build(cls, data: dict | None, where: str, base=None):
    """Overlay ``data`` on ``base`` (default: a fresh ``cls()``)."""
    base = cls() if base is None else base
    if data is None:
        return base
    if not isinstance(data, dict):
        raise InvalidInputError(f"{where} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")
    updates: dict[str, Any] = {}
    for key, value in data.items():
        current = getattr(base, key)
        if key in _NESTED.get(cls, {}):
            updates[key] = _NESTED[cls][key](value, f"{where}.{key}")
        elif is_dataclass(current):
            updates[key] = _build(type(current), value, f"{where}.{key}", current)
        else:
            updates[key] = _tuples(value)
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"invalid {where}: {exc}") from exc


def _segmentor(value, where):
    if not isinstance(value, dict):
        raise InvalidInputError(f"{where} must be a mapping")
    merged = SegmentorConfig().to_dict()
    unknown = set(value) - set(merged)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")
    voxel = value.get("voxel", {})
    if set(voxel) - set(merged["voxel"]):
        raise InvalidInputError(f"unknown keys in {where}.voxel: {sorted(set(voxel) - set(merged['voxel']))}")
    merged.update({k: v for k, v in value.items() if k != "voxel"})
    merged["voxel"].update(voxel)
    try:
        return SegmentorConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"invalid {where}: {exc}") from exc


_NESTED = {RunConfig: {"segmentor": _segmentor}}


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Read a YAML run configuration; ``None`` gives the defaults."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidInputError(f"config file {str(p)!r} does not exist")
        data = yaml.safe_load(p.read_text()) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return _build(RunConfig, data, "config")


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = [
    "AugmentConfig", "BenchConfig", "DatasetConfig", "EvalConfig", "PreviewConfig",
    "RunConfig", "TrainConfig", "dump_config", "load_config",
]
