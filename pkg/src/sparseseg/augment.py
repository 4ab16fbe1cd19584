"""Global similarity augmentation and scan-mixing operators.

The mixing operators partition both scans with the same angular rule and swap
alternating parts, so every input point ends up in exactly one output with its
label unchanged. Intervals are half-open; a point on a boundary belongs to the
higher band.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from sparseseg.errors import InvalidInputError, InvalidSectorError, MissingLabelsError
from sparseseg.pointcloud import PointCloud, SimilarityTransform, apply_transform, to_spherical

Axis = Literal["inclination", "azimuth"]
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class MixPartition:
    operator: str
    axis: str
    boundaries: np.ndarray  # band edges, or [start, start + width] for a sector
    count: int  # bands / regions; 2 for a sector swap
    parity: str = "mixed_a takes even bands of a, odd bands of b"


@dataclass(frozen=True)
class MixResult:
    mixed_a: PointCloud
    mixed_b: PointCloud
    partition: MixPartition
    # (source cloud 0|1, row) for every output point
    sources_a: np.ndarray = field(repr=False, default=None)
    sources_b: np.ndarray = field(repr=False, default=None)


def _require_labels(*clouds: PointCloud):
    for c in clouds:
        if not c.has_labels:
            raise MissingLabelsError("mixing needs labeled clouds")


def _angles(cloud: PointCloud, axis: Axis) -> np.ndarray:
    if len(cloud) == 0:
        return np.zeros(0)
    sph = to_spherical(cloud.positions)
    if axis == "inclination":
        return np.atleast_1d(sph.inclination)
    if axis == "azimuth":
        return np.atleast_1d(sph.azimuth)
    raise InvalidInputError(f"unknown mixing axis {axis!r}")


def _draw_count(count: int | Sequence[int], rng: np.random.Generator) -> int:
    if np.ndim(count) == 0:
        n = int(count)
    else:
        choices = [int(c) for c in count]
        if not choices:
            raise InvalidInputError("empty band-count set")
        n = int(choices[rng.integers(len(choices))])
    if n < 2:
        raise InvalidInputError("need at least two bands")
    return n


def angular_bands(a: PointCloud, b: PointCloud, axis: Axis, n: int):
    """Band index per point of ``a`` and ``b`` plus the band edges."""
    ang_a, ang_b = _angles(a, axis), _angles(b, axis)
    if axis == "azimuth":
        lo, hi = -np.pi, np.pi
    else:
        both = np.concatenate([ang_a, ang_b])
        lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 0.0)
    edges = np.linspace(lo, hi, n + 1)
    width = (hi - lo) / n

    def band(ang):
        if width <= 0:
            return np.zeros(ang.shape[0], dtype=np.int64)
        return np.clip(np.floor((ang - lo) / width), 0, n - 1).astype(np.int64)

    return band(ang_a), band(ang_b), edges


def _swap(a: PointCloud, b: PointCloud, take_a: np.ndarray, take_b: np.ndarray, partition: MixPartition) -> MixResult:
    """mixed_a = a[take_a] + b[take_b]; mixed_b = the complement."""
    ia, ib = np.flatnonzero(take_a), np.flatnonzero(take_b)
    ca, cb = np.flatnonzero(~take_a), np.flatnonzero(~take_b)
    mixed_a = PointCloud.concat([a.select(ia), b.select(ib)])
    mixed_b = PointCloud.concat([b.select(cb), a.select(ca)])
    src = lambda cloud_id, rows: np.column_stack([np.full(rows.size, cloud_id), rows])  # noqa: E731
    return MixResult(
        mixed_a,
        mixed_b,
        partition,
        np.vstack([src(0, ia), src(1, ib)]).astype(np.int64),
        np.vstack([src(1, cb), src(0, ca)]).astype(np.int64),
    )


def lasermix(a: PointCloud, b: PointCloud, axis: Axis = "inclination",
             num_bands: int | Sequence[int] = 4, seed=None) -> MixResult:
    """Swap alternating equal-angle bands along inclination or azimuth.

    Inclination bands span the union range of both scans; azimuth bands span
    [-pi, pi). ``num_bands`` may be a set to draw from under ``seed``.
    """
    _require_labels(a, b)
    rng = np.random.default_rng(seed)
    n = _draw_count(num_bands, rng)
    band_a, band_b, edges = angular_bands(a, b, axis, n)
    part = MixPartition("lasermix", axis, edges, n)
    return _swap(a, b, band_a % 2 == 0, band_b % 2 == 1, part)


def frustummix(a: PointCloud, b: PointCloud, axis: Axis = "inclination",
               num_regions: int | Sequence[int] = (2, 3, 4, 5, 6), seed=None) -> MixResult:
    """Swap alternating frustum regions; the region count may be randomized.

    With a fixed count this produces the same partition as :func:`lasermix`.
    """
    _require_labels(a, b)
    rng = np.random.default_rng(seed)
    n = _draw_count(num_regions, rng)
    band_a, band_b, edges = angular_bands(a, b, axis, n)
    part = MixPartition("frustummix", axis, edges, n)
    return _swap(a, b, band_a % 2 == 0, band_b % 2 == 1, part)


def in_sector(phi: np.ndarray, start: float, width: float) -> np.ndarray:
    return np.mod(np.asarray(phi) - start, TWO_PI) < width


def polarmix_scene(a: PointCloud, b: PointCloud, sector_start: float | None = None,
                   sector_width: float = np.pi, seed=None) -> MixResult:
    """Exchange the azimuth sector ``[start, start + width)`` (mod 2 pi).

    ``sector_start=None`` draws the start uniformly from [-pi, pi) under ``seed``.
    """
    _require_labels(a, b)
    if not 0.0 < sector_width < TWO_PI:
        raise InvalidSectorError(f"sector width {sector_width} outside (0, 2*pi)")
    if sector_start is None:
        sector_start = float(np.random.default_rng(seed).uniform(-np.pi, np.pi))
    inside_a = in_sector(_angles(a, "azimuth"), sector_start, sector_width)
    inside_b = in_sector(_angles(b, "azimuth"), sector_start, sector_width)
    part = MixPartition(
        "polarmix", "azimuth", np.array([sector_start, sector_start + sector_width]), 2,
        parity="mixed_a takes a outside the sector and b inside it",
    )
    return _swap(a, b, ~inside_a, inside_b, part)


@dataclass(frozen=True)
class GlobalAugRanges:
    yaw: tuple[float, float] = (-np.pi, np.pi)
    scale: tuple[float, float] = (0.95, 1.05)
    flip_prob: float = 0.5
    translation: float = 0.1  # per-axis half-width, meters

    @classmethod
    def identity(cls) -> GlobalAugRanges:
        return cls(yaw=(0.0, 0.0), scale=(1.0, 1.0), flip_prob=0.0, translation=0.0)


def sample_global_transform(ranges: GlobalAugRanges, rng: np.random.Generator) -> SimilarityTransform:
    def draw(lo, hi):
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    yaw = draw(*ranges.yaw)
    scale = draw(*ranges.scale)
    flips = rng.random(2) < ranges.flip_prob
    t = ranges.translation
    trans = rng.uniform(-t, t, size=3) if t > 0 else np.zeros(3)
    return SimilarityTransform(yaw, scale, bool(flips[0]), bool(flips[1]), tuple(trans))


def random_global_aug(cloud: PointCloud, ranges: GlobalAugRanges = GlobalAugRanges(), seed=None) -> PointCloud:
    rng = np.random.default_rng(seed)
    return apply_transform(cloud, sample_global_transform(ranges, rng))


@dataclass(frozen=True)
class MixPolicy:
    """Picks one mixing operator per call, uniformly under the caller's RNG."""

    operators: tuple[str, ...] = ("lasermix", "polarmix")
    prob: float = 1.0
    lasermix_axis: Axis = "inclination"
    lasermix_bands: tuple[int, ...] = (2, 3, 4, 5, 6)
    polarmix_width: tuple[float, float] = (np.pi / 4, np.pi)
    frustummix_axis: Axis = "inclination"
    frustummix_regions: tuple[int, ...] = (2, 3, 4, 5, 6)

    def __post_init__(self):
        unknown = set(self.operators) - {"lasermix", "polarmix", "frustummix"}
        if unknown:
            raise InvalidInputError(f"unknown mixing operators {sorted(unknown)}")

    def apply(self, a: PointCloud, b: PointCloud, rng: np.random.Generator) -> MixResult | None:
        if not self.operators or rng.random() >= self.prob:
            return None
        op = self.operators[rng.integers(len(self.operators))]
        seed = int(rng.integers(2**63))
        if op == "lasermix":
            return lasermix(a, b, self.lasermix_axis, self.lasermix_bands, seed)
        if op == "frustummix":
            return frustummix(a, b, self.frustummix_axis, self.frustummix_regions, seed)
        width = float(rng.uniform(*self.polarmix_width))
        return polarmix_scene(a, b, None, width, seed)
