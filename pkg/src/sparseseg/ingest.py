"""SemanticKITTI-format readers/writers, label remapping and synthetic scenes.

Scan files are packed little-endian float32 quadruples ``(x, y, z, intensity)``.
Label files are little-endian uint32 words whose low 16 bits hold the semantic
class and whose high 16 bits hold the instance id.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import yaml

from sparseseg.errors import (
    InvalidInputError,
    MalformedLabelError,
    MalformedScanError,
    UnknownClassError,
)
from sparseseg.pointcloud import IGNORE, PointCloud

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")


def read_scan(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise MalformedScanError(f"scan length {len(data)} is not a multiple of 16 bytes")
    raw = np.frombuffer(data, dtype=_SCAN_DTYPE).reshape(-1, 4)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("scan contains non-finite values")
    return PointCloud(raw[:, :3].astype(np.float64), raw[:, 3].astype(np.float64))


def write_scan(cloud: PointCloud) -> bytes:
    packed = np.empty((len(cloud), 4), dtype=_SCAN_DTYPE)
    packed[:, :3] = cloud.positions
    packed[:, 3] = cloud.intensity
    return packed.tobytes()


def read_labels(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) % 4:
        raise MalformedLabelError(f"label length {len(data)} is not a multiple of 4 bytes")
    words = np.frombuffer(data, dtype=_LABEL_DTYPE)
    return (words & 0xFFFF).astype(np.uint32), (words >> 16).astype(np.uint32)


def write_labels(semantic, instance=None) -> bytes:
    semantic = np.asarray(semantic, dtype=np.int64).reshape(-1)
    instance = (
        np.zeros_like(semantic)
        if instance is None
        else np.asarray(instance, dtype=np.int64).reshape(-1)
    )
    if semantic.shape != instance.shape:
        raise InvalidInputError("semantic and instance arrays differ in length")
    for name, arr in (("semantic", semantic), ("instance", instance)):
        if arr.size and (arr.min() < 0 or arr.max() >= 1 << 16):
            raise InvalidInputError(f"{name} ids must lie in [0, 2**16)")
    words = (instance << 16) | semantic
    return words.astype(_LABEL_DTYPE).tobytes()


@dataclass(frozen=True)
class LabelRemap:
    """Raw class id -> evaluation id (``0..C-1``) or :data:`IGNORE`."""

    table: Mapping[int, int]
    class_names: tuple[str, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        table = {int(k): int(v) for k, v in self.table.items()}
        for raw in table:
            if not 0 <= raw < 1 << 16:
                raise InvalidInputError(f"raw id {raw} outside [0, 2**16)")
        used = sorted({v for v in table.values() if v != IGNORE})
        if used != list(range(len(used))):
            raise InvalidInputError("evaluation ids must be contiguous from 0")
        if self.class_names and len(self.class_names) != len(used):
            raise InvalidInputError(
                f"{len(self.class_names)} class names for {len(used)} evaluation ids"
            )
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return len({v for v in self.table.values() if v != IGNORE})

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> LabelRemap:
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))

    @classmethod
    def from_dict(cls, doc: dict) -> LabelRemap:
        table = {int(k): int(v) for k, v in (doc.get("map") or {}).items()}
        for raw in doc.get("ignore") or []:
            table[int(raw)] = IGNORE
        return cls(table, tuple(doc.get("classes") or ()), doc.get("name", "custom"))

    @classmethod
    def semantic_kitti(cls) -> LabelRemap:
        ref = resources.files("sparseseg.data").joinpath("semantic_kitti.yaml")
        with ref.open() as f:
            return cls.from_dict(yaml.safe_load(f))

    @classmethod
    def identity(cls, num_classes: int) -> LabelRemap:
        return cls({c: c for c in range(num_classes)})


def remap(labels, table: LabelRemap) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    lut = np.full(max(max(table.table), int(labels.max())) + 1, -1, dtype=np.int64)
    for raw, ev in table.table.items():
        lut[raw] = ev
    if labels.min() < 0:
        raise UnknownClassError(int(labels.min()))
    out = lut[labels]
    missing = out < 0
    if missing.any():
        raise UnknownClassError(int(labels[np.argmax(missing)]))
    return out


def load_scan(path: str | os.PathLike) -> PointCloud:
    return read_scan(Path(path).read_bytes())


def load_labeled_scan(
    scan_path: str | os.PathLike, label_path: str | os.PathLike, table: LabelRemap
) -> PointCloud:
    cloud = load_scan(scan_path)
    semantic, _ = read_labels(Path(label_path).read_bytes())
    if semantic.shape[0] != len(cloud):
        raise MalformedLabelError(
            f"{label_path}: {semantic.shape[0]} labels for {len(cloud)} points"
        )
    return PointCloud(cloud.positions, cloud.intensity, remap(semantic, table))


def iter_kitti(
    root: str | os.PathLike, sequences: Sequence[str | int], table: LabelRemap
) -> Iterator[PointCloud]:
    """Yield labeled scans from a ``sequences/<seq>/{velodyne,labels}`` tree."""
    for seq in sequences:
        seq_dir = Path(root) / "sequences" / f"{int(seq):02d}"
        for scan_path in sorted((seq_dir / "velodyne").glob("*.bin")):
            label_path = seq_dir / "labels" / (scan_path.stem + ".label")
            yield load_labeled_scan(scan_path, label_path, table)


# ---------------------------------------------------------------------------
# Synthetic scenes

SYNTH_CLASSES = ("ground", "box", "pole")
GROUND, BOX, POLE = range(3)
GROUND_Z = -1.73  # sensor mounted this far above a flat ground plane

_INTENSITY_MEAN = {GROUND: 0.3, BOX: 0.45, POLE: 0.55}
_INTENSITY_STD = 0.15


@dataclass(frozen=True)
class SynthSceneConfig:
    ground_patches: int = 8
    boxes: int = 6
    poles: int = 6
    beams: int = 8
    points_per_beam: int = 32
    extent: float = 40.0
    seed: int = 0

    def __post_init__(self):
        for name in ("ground_patches", "boxes", "poles", "beams", "points_per_beam"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not self.extent > 0:
            raise InvalidInputError("extent must be positive")

    @property
    def total_points(self) -> int:
        return (self.ground_patches + self.boxes + self.poles) * self.beams * self.points_per_beam


def _sample_ground(rng, cfg: SynthSceneConfig):
    half = cfg.extent / 2
    cx, cy = rng.uniform(-half, half, size=2)
    sx, sy = rng.uniform(4.0, 10.0, size=2)
    xs = cx + np.linspace(-sx / 2, sx / 2, cfg.beams)
    ys = rng.uniform(cy - sy / 2, cy + sy / 2, size=(cfg.beams, cfg.points_per_beam))
    x = np.repeat(xs, cfg.points_per_beam) + rng.normal(0, 0.05, size=ys.size)
    z = GROUND_Z + rng.normal(0, 0.02, size=ys.size)
    return np.stack([x, ys.reshape(-1), z], axis=1)


def _levels(rng, cfg: SynthSceneConfig, height: float) -> np.ndarray:
    z = GROUND_Z + np.linspace(0.15, height, cfg.beams)
    return np.repeat(z, cfg.points_per_beam) + rng.normal(0, 0.02, size=z.size * cfg.points_per_beam)


def _sample_box(rng, cfg: SynthSceneConfig):
    half = cfg.extent / 2
    cx, cy = rng.uniform(-half, half, size=2)
    w, l = rng.uniform(1.5, 4.5, size=2)
    h = rng.uniform(1.2, 2.5)
    corners = np.array([[-w, -l], [w, -l], [w, l], [-w, l], [-w, -l]]) / 2
    edges = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(edges)])
    # uniform by arclength along the footprint perimeter
    t = rng.uniform(0, cum[-1], size=cfg.beams * cfg.points_per_beam)
    k = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, 3)
    frac = ((t - cum[k]) / edges[k])[:, None]
    xy = corners[k] + frac * (corners[k + 1] - corners[k])
    z = _levels(rng, cfg, h)
    return np.column_stack([cx + xy[:, 0], cy + xy[:, 1], z])


def _sample_pole(rng, cfg: SynthSceneConfig):
    half = cfg.extent / 2
    cx, cy = rng.uniform(-half, half, size=2)
    radius = rng.uniform(0.08, 0.2)
    h = rng.uniform(3.0, 6.0)
    a = rng.uniform(-np.pi, np.pi, size=cfg.beams * cfg.points_per_beam)
    z = _levels(rng, cfg, h)
    return np.stack([cx + radius * np.cos(a), cy + radius * np.sin(a), z], axis=1)


def synth_scene(cfg: SynthSceneConfig) -> PointCloud:
    """Sample a labeled scene of ground patches, boxes and poles.

    Each primitive contributes ``beams * points_per_beam`` points laid out in
    ``beams`` rows (ground) or height levels (boxes, poles).
    """
    rng = np.random.default_rng(cfg.seed)
    parts, labels = [], []
    for count, sampler, cls in (
        (cfg.ground_patches, _sample_ground, GROUND),
        (cfg.boxes, _sample_box, BOX),
        (cfg.poles, _sample_pole, POLE),
    ):
        for _ in range(count):
            pts = sampler(rng, cfg)
            parts.append(pts)
            labels.append(np.full(len(pts), cls, dtype=np.int64))
    if not parts:
        return PointCloud.empty(labeled=True)
    pos = np.concatenate(parts)
    lab = np.concatenate(labels)
    mu = np.vectorize(_INTENSITY_MEAN.get)(lab) if lab.size else np.zeros(0)
    inten = np.clip(rng.normal(mu, _INTENSITY_STD), 0.0, 1.0)
    return PointCloud(pos, inten, lab)


@dataclass(frozen=True)
class SynthDataset:
    """A reproducible list of synthetic scenes derived from one base config."""

    base: SynthSceneConfig = field(default_factory=SynthSceneConfig)
    count: int = 4

    def scenes(self) -> list[PointCloud]:
        return [synth_scene(replace(self.base, seed=self.base.seed + k)) for k in range(self.count)]
