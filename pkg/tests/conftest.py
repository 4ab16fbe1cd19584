from __future__ import annotations

import numpy as np
import pytest

from sparseseg.pointcloud import PointCloud
from sparseseg.sparse import ConvSpec, SparseTensor, build_kernel_map, output_coords


def random_coords(rng, grid: int, nnz: int, ndim: int = 3) -> np.ndarray:
    """``nnz`` distinct cells drawn from a ``grid**ndim`` box, lexicographically sorted."""
    cells = rng.choice(grid**ndim, size=min(nnz, grid**ndim), replace=False)
    coords = np.stack(np.unravel_index(cells, (grid,) * ndim), axis=1).astype(np.int64)
    return np.unique(coords, axis=0)


def random_instance(rng, grid=None, nnz=None, c_in=None, c_out=None, kernel_size=None,
                    stride=None, submanifold=None, ndim=3, dtype=np.float64):
    """A random sparse input, conv spec and kernel map within the acceptance ranges."""
    grid = grid or int(rng.integers(2, 17))
    nnz = nnz or int(rng.integers(1, min(512, grid**ndim) + 1))
    c_in = c_in or int(rng.integers(1, 9))
    c_out = c_out or int(rng.integers(1, 9))
    k = kernel_size or int(rng.choice([1, 2, 3, 5]))
    s = stride or int(rng.choice([1, 2]))
    if submanifold is None:
        submanifold = s == 1 and k % 2 == 1 and bool(rng.integers(2))
    coords = random_coords(rng, grid, nnz, ndim)
    x = SparseTensor(coords, rng.standard_normal((coords.shape[0], c_in)).astype(dtype))
    spec = ConvSpec(k, ndim, s, rng.standard_normal((k**ndim, c_in, c_out)), submanifold)
    out = output_coords(coords, spec)
    return x, spec, build_kernel_map(coords, out, spec)


def random_cloud(rng, n: int, labeled: bool = True, num_classes: int = 3, spread: float = 10.0) -> PointCloud:
    pos = rng.uniform(-spread, spread, size=(n, 3))
    inten = rng.uniform(0, 1, size=n)
    labels = rng.integers(0, num_classes, size=n) if labeled else None
    return PointCloud(pos, inten, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
