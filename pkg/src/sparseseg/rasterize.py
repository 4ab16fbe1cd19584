"""Voxel grids, range images and the point <-> cell bookkeeping between them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from sparseseg.errors import InconsistentMapError, InvalidInputError
from sparseseg.pointcloud import IGNORE, PointCloud, to_cylindrical, to_spherical

Mode = Literal["cartesian", "cylindrical", "polar-bev"]

_AXES = {"cartesian": 3, "cylindrical": 3, "polar-bev": 2}
_INT32_MAX = np.iinfo(np.int32).max


@dataclass(frozen=True)
class VoxelizationConfig:
    """Axis-aligned binning in the coordinate frame selected by ``mode``.

    cartesian bins (x, y, z); cylindrical bins (rho, phi, z); polar-bev bins
    (rho, phi). Cells are half-open: ``[lower + k*size, lower + (k+1)*size)``.
    """

    mode: Mode = "cartesian"
    lower: tuple[float, ...] = (-20.0, -20.0, -2.0)
    upper: tuple[float, ...] = (20.0, 20.0, 4.0)
    cell_size: tuple[float, ...] = (0.1, 0.1, 0.1)
    out_of_bounds: Literal["drop", "clamp"] = "drop"

    def __post_init__(self):
        if self.mode not in _AXES:
            raise InvalidInputError(f"unknown voxelization mode {self.mode!r}")
        if self.out_of_bounds not in ("drop", "clamp"):
            raise InvalidInputError(f"unknown out-of-bounds policy {self.out_of_bounds!r}")
        n = _AXES[self.mode]
        for name in ("lower", "upper", "cell_size"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != n:
                raise InvalidInputError(f"{self.mode} needs {n} values for {name}")
            object.__setattr__(self, name, value)
        if any(u <= lo for lo, u in zip(self.lower, self.upper)):
            raise InvalidInputError("upper bound must exceed lower bound on every axis")
        if any(s <= 0 for s in self.cell_size):
            raise InvalidInputError("cell sizes must be positive")
        if any(g > _INT32_MAX for g in self.grid_shape):
            raise InvalidInputError("grid extent does not fit in int32")

    @property
    def ndim(self) -> int:
        return _AXES[self.mode]

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(
            int(np.ceil((u - lo) / s)) for lo, u, s in zip(self.lower, self.upper, self.cell_size)
        )

    def frame(self, positions: np.ndarray) -> np.ndarray:
        """Point coordinates in this config's binning frame."""
        if self.mode == "cartesian":
            return np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        rho, phi, z = to_cylindrical(np.asarray(positions).reshape(-1, 3))
        if self.mode == "cylindrical":
            return np.column_stack([rho, phi, z])
        return np.column_stack([rho, phi])


@dataclass(frozen=True)
class PointToCellMap:
    """Both directions of the point/voxel assignment.

    ``point_to_voxel[k]`` is the voxel row of point ``k`` or -1 when dropped.
    Members of voxel ``v`` are ``order[offsets[v]:offsets[v + 1]]`` (ascending).
    """

    point_to_voxel: np.ndarray
    order: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_assignment(cls, point_to_voxel: np.ndarray, num_voxels: int) -> PointToCellMap:
        p2v = np.asarray(point_to_voxel, dtype=np.int64)
        kept = np.flatnonzero(p2v >= 0)
        order = kept[np.argsort(p2v[kept], kind="stable")]
        counts = np.bincount(p2v[kept], minlength=num_voxels)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(p2v, order, offsets)

    @property
    def num_voxels(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def num_points(self) -> int:
        return self.point_to_voxel.shape[0]

    def members(self, v: int) -> np.ndarray:
        return self.order[self.offsets[v] : self.offsets[v + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def voxelize(cloud: PointCloud, cfg: VoxelizationConfig) -> tuple[np.ndarray, PointToCellMap]:
    """Bin points into cells; returns sorted unique cell coords and the map."""
    n = len(cloud)
    if n == 0:
        return np.zeros((0, cfg.ndim), dtype=np.int64), PointToCellMap.from_assignment(
            np.zeros(0, dtype=np.int64), 0
        )
    lower = np.asarray(cfg.lower)
    size = np.asarray(cfg.cell_size)
    shape = np.asarray(cfg.grid_shape)
    idx = np.floor((cfg.frame(cloud.positions) - lower) / size).astype(np.int64)
    if cfg.out_of_bounds == "clamp":
        idx = np.clip(idx, 0, shape - 1)
        keep = np.ones(n, dtype=bool)
    else:
        keep = np.all((idx >= 0) & (idx < shape), axis=1)
    p2v = np.full(n, -1, dtype=np.int64)
    if not keep.any():
        return np.zeros((0, cfg.ndim), dtype=np.int64), PointToCellMap.from_assignment(p2v, 0)
    coords, inverse = np.unique(idx[keep], axis=0, return_inverse=True)
    p2v[keep] = inverse.reshape(-1)
    return coords, PointToCellMap.from_assignment(p2v, coords.shape[0])


def occupancy(coords: np.ndarray, cfg: VoxelizationConfig) -> float:
    """Fraction of grid cells that hold at least one point."""
    return coords.shape[0] / float(np.prod(np.asarray(cfg.grid_shape, dtype=np.float64)))


def point_channels(cloud: PointCloud) -> np.ndarray:
    return np.column_stack([cloud.positions, cloud.intensity])


def encode_voxel_features(cloud: PointCloud, cmap: PointToCellMap) -> np.ndarray:
    """Mean of (x, y, z, intensity) over each voxel's member points."""
    return pool_mean(point_channels(cloud), cmap)


def pool_mean(values: np.ndarray, cmap: PointToCellMap) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((cmap.num_voxels, values.shape[1]))
    kept = cmap.point_to_voxel >= 0
    np.add.at(out, cmap.point_to_voxel[kept], values[kept])
    counts = cmap.counts()
    nonempty = counts > 0
    out[nonempty] /= counts[nonempty, None]
    return out


def devoxelize(cell_values: np.ndarray, cmap: PointToCellMap, fill=None) -> np.ndarray:
    """Scatter per-voxel values back to points.

    Dropped points get ``fill``: IGNORE for 1-D integer labels, zeros otherwise.
    """
    cell_values = np.asarray(cell_values)
    if cell_values.shape[0] != cmap.num_voxels:
        raise InconsistentMapError(
            f"{cell_values.shape[0]} cell values for {cmap.num_voxels} voxels"
        )
    if fill is None:
        fill = IGNORE if cell_values.ndim == 1 and cell_values.dtype.kind in "iu" else 0
    out = np.full((cmap.num_points,) + cell_values.shape[1:], fill, dtype=cell_values.dtype)
    kept = cmap.point_to_voxel >= 0
    out[kept] = cell_values[cmap.point_to_voxel[kept]]
    return out


@dataclass(frozen=True)
class RangeImage:
    """H x W projection; ``index`` holds the nearest point per pixel or -1."""

    index: np.ndarray
    channels: np.ndarray  # (H, W, 5): range, x, y, z, intensity; zeros where empty
    pixel_of_point: np.ndarray  # (N, 2) row, col

    EMPTY = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape


def project_range(
    cloud: PointCloud, height: int, width: int, fov_up: float, fov_down: float
) -> RangeImage:
    """Spherical projection with nearest-range occupancy per pixel.

    Rows and columns are clamped into the image, so every point lands somewhere.
    """
    if not fov_up > fov_down:
        raise InvalidInputError("fov_up must exceed fov_down")
    if height < 1 or width < 1:
        raise InvalidInputError("image dimensions must be positive")
    n = len(cloud)
    index = np.full((height, width), RangeImage.EMPTY, dtype=np.int64)
    channels = np.zeros((height, width, 5))
    if n == 0:
        return RangeImage(index, channels, np.zeros((0, 2), dtype=np.int64))
    sph = to_spherical(cloud.positions)
    r = np.atleast_1d(sph.range)
    row = np.floor((1.0 - (np.atleast_1d(sph.inclination) - fov_down) / (fov_up - fov_down)) * height)
    col = np.floor((np.atleast_1d(sph.azimuth) + np.pi) / (2.0 * np.pi) * width)
    row = np.clip(row, 0, height - 1).astype(np.int64)
    col = np.clip(col, 0, width - 1).astype(np.int64)

    pix = row * width + col
    # per pixel: nearest range first, ties to the lowest point index
    order = np.lexsort((np.arange(n), r, pix))
    _, first = np.unique(pix[order], return_index=True)
    winners = order[first]
    index[row[winners], col[winners]] = winners
    channels[row[winners], col[winners]] = np.column_stack(
        [r[winners], cloud.positions[winners], cloud.intensity[winners]]
    )
    return RangeImage(index, channels, np.column_stack([row, col]))
