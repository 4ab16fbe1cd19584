"""Point-cloud value types, angular frame conversions and similarity transforms.

Azimuth is reported on the half-open interval [-pi, pi): an ``atan2`` result of
exactly +pi is folded onto -pi so that angular bins are never ambiguous. The
origin (and any point on the z axis, for azimuth) maps to angle 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sparseseg.errors import InvalidInputError

IGNORE = 255
"""Reserved evaluation label for points that are not scored."""


@dataclass(frozen=True)
class PointCloud:
    """N points with positions (meters), intensity in [0, 1] and optional labels."""

    positions: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if inten.shape[0] != pos.shape[0]:
            raise InvalidInputError(
                f"intensity has {inten.shape[0]} entries for {pos.shape[0]} points"
            )
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensity", inten)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pos.shape[0]:
                raise InvalidInputError(
                    f"labels have {lab.shape[0]} entries for {pos.shape[0]} points"
                )
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @classmethod
    def empty(cls, labeled: bool = False) -> PointCloud:
        return cls(
            np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64) if labeled else None
        )

    def select(self, index) -> PointCloud:
        """Subset by boolean mask or integer index array (order follows ``index``)."""
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.positions[index], self.intensity[index], labels)

    def with_positions(self, positions: np.ndarray) -> PointCloud:
        return PointCloud(positions, self.intensity, self.labels)

    @staticmethod
    def concat(clouds: Sequence[PointCloud]) -> PointCloud:
        if not clouds:
            return PointCloud.empty()
        labeled = [c.labels is not None for c in clouds]
        if any(labeled) and not all(labeled):
            raise InvalidInputError("cannot concatenate labeled and unlabeled clouds")
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.labels for c in clouds]) if all(labeled) else None,
        )


@dataclass(frozen=True)
class SphericalCoord:
    """Range, azimuth in [-pi, pi) and inclination in [-pi/2, pi/2].

    Fields are scalars for a single point or arrays for a batch.
    """

    range: float | np.ndarray
    azimuth: float | np.ndarray
    inclination: float | np.ndarray


def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("coordinates must be finite")
    return arr, single


def wrap_azimuth(phi):
    """Fold angles onto [-pi, pi)."""
    phi = np.asarray(phi, dtype=np.float64)
    out = np.mod(phi + np.pi, 2.0 * np.pi) - np.pi
    # mod can round up to exactly pi for tiny negative inputs
    return np.where(out >= np.pi, -np.pi, out)


def azimuth(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    phi = np.arctan2(y, x)
    phi = np.where(phi >= np.pi, -np.pi, phi)
    # atan2(+-0, -0) yields +-pi; the axis-degenerate convention is 0
    return np.where((x == 0.0) & (y == 0.0), 0.0, phi)


def to_spherical(p) -> SphericalCoord:
    arr, single = _as_points(p)
    x, y, z = arr[:, 0], arr[:, 1], arr[:, 2]
    rho = np.hypot(x, y)
    r = np.sqrt(rho * rho + z * z)
    phi = azimuth(x, y)
    theta = np.where((rho == 0.0) & (z == 0.0), 0.0, np.arctan2(z, rho))
    if single:
        return SphericalCoord(float(r[0]), float(phi[0]), float(theta[0]))
    return SphericalCoord(r, phi, theta)


def from_spherical(s: SphericalCoord) -> np.ndarray:
    r = np.asarray(s.range, dtype=np.float64)
    phi = np.asarray(s.azimuth, dtype=np.float64)
    theta = np.asarray(s.inclination, dtype=np.float64)
    cos_t = np.cos(theta)
    return np.stack(
        [r * cos_t * np.cos(phi), r * cos_t * np.sin(phi), r * np.sin(theta)], axis=-1
    )


def to_cylindrical(p):
    """Return ``(rho, phi, z)``; scalars for one point, arrays for a batch."""
    arr, single = _as_points(p)
    rho = np.hypot(arr[:, 0], arr[:, 1])
    phi = azimuth(arr[:, 0], arr[:, 1])
    z = arr[:, 2].copy()
    if single:
        return float(rho[0]), float(phi[0]), float(z[0])
    return rho, phi, z


def inclination(positions: np.ndarray) -> np.ndarray:
    return to_spherical(np.asarray(positions).reshape(-1, 3)).inclination


def _rot(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SimilarityTransform:
    """Flip, then yaw rotation, then uniform scale, then translation."""

    yaw: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False
    translation: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidInputError(f"scale must be positive, got {self.scale}")
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3:
            raise InvalidInputError("translation must be a 3-vector")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "flip_x", bool(self.flip_x))
        object.__setattr__(self, "flip_y", bool(self.flip_y))

    @property
    def is_identity(self) -> bool:
        return (
            self.yaw == 0.0
            and self.scale == 1.0
            and not self.flip_x
            and not self.flip_y
            and self.translation == (0.0, 0.0, 0.0)
        )

    def flip_matrix(self) -> np.ndarray:
        return np.diag([-1.0 if self.flip_x else 1.0, -1.0 if self.flip_y else 1.0, 1.0])

    def linear(self) -> np.ndarray:
        """The 3x3 linear part ``scale * R(yaw) @ F``."""
        return self.scale * _rot(self.yaw) @ self.flip_matrix()

    def apply(self, positions: np.ndarray) -> np.ndarray:
        return positions @ self.linear().T + np.asarray(self.translation)

    def _mirrors(self) -> bool:
        return self.flip_x != self.flip_y

    def inverse(self) -> SimilarityTransform:
        # F R(-a) == R(a) F when F mirrors (det -1); flip_xy is a half-turn and commutes
        yaw = self.yaw if self._mirrors() else -self.yaw
        inv = SimilarityTransform(yaw, 1.0 / self.scale, self.flip_x, self.flip_y)
        t = -inv.linear() @ np.asarray(self.translation)
        return SimilarityTransform(inv.yaw, inv.scale, inv.flip_x, inv.flip_y, tuple(t))

    def then(self, other: SimilarityTransform) -> SimilarityTransform:
        """Transform equivalent to applying ``self`` first and ``other`` second."""
        first_yaw = -self.yaw if other._mirrors() else self.yaw
        t = other.linear() @ np.asarray(self.translation) + np.asarray(other.translation)
        return SimilarityTransform(
            other.yaw + first_yaw,
            other.scale * self.scale,
            self.flip_x != other.flip_x,
            self.flip_y != other.flip_y,
            tuple(t),
        )


def apply_transform(cloud: PointCloud, t: SimilarityTransform) -> PointCloud:
    if t.is_identity:
        return cloud
    return cloud.with_positions(t.apply(cloud.positions))
