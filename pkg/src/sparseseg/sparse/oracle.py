"""Dense reference convolution used to check the sparse dataflows.

Evaluates ``out[i] = sum_delta in[stride * i + delta] @ W[delta]`` directly on
a dense float64 grid, with cells outside the input grid read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparseseg.sparse.tensor import ConvSpec, SparseTensor


@dataclass(frozen=True)
class DenseGrid:
    """Features on a dense box; ``values[idx]`` sits at coordinate ``origin + idx``."""

    values: np.ndarray  # (*shape, C)
    origin: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    def at(self, coords: np.ndarray) -> np.ndarray:
        """Values at integer coordinates; zero outside the box."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(self.origin))
        idx = coords - self.origin
        shape = np.asarray(self.shape)
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        out = np.zeros((coords.shape[0], self.values.shape[-1]), dtype=self.values.dtype)
        out[inside] = self.values[tuple(idx[inside].T)]
        return out


def densify(x: SparseTensor, origin=None, shape=None) -> DenseGrid:
    ndim = x.ndim
    if origin is None:
        origin = x.coords.min(axis=0) if len(x) else np.zeros(ndim, dtype=np.int64)
    origin = np.asarray(origin, dtype=np.int64)
    if shape is None:
        shape = (x.coords.max(axis=0) - origin + 1) if len(x) else np.zeros(ndim, dtype=np.int64)
    values = np.zeros(tuple(int(s) for s in shape) + (x.channels,), dtype=np.float64)
    if len(x):
        values[tuple((x.coords - origin).T)] = x.features
    return DenseGrid(values, origin)


def conv_dense_oracle(grid: DenseGrid, spec: ConvSpec) -> DenseGrid:
    """Dense strided convolution over every output cell any input can reach."""
    w = np.asarray(spec.weights, dtype=np.float64)
    x = np.asarray(grid.values, dtype=np.float64)
    s = spec.stride
    offsets = spec.offsets().offsets
    lo_in = grid.origin
    hi_in = grid.origin + np.asarray(grid.shape) - 1
    d_lo, d_hi = offsets.min(axis=0), offsets.max(axis=0)
    out_lo = -((d_hi - lo_in) // s)  # ceil((lo_in - d_hi) / s)
    out_hi = (hi_in - d_lo) // s
    n_out = np.maximum(out_hi - out_lo + 1, 0)
    out = np.zeros(tuple(n_out) + (w.shape[2],))
    if not np.all(n_out > 0) or x.size == 0:
        return DenseGrid(out, out_lo)

    # zero-padded input covering the grid and every stride * i + delta touched
    pad_lo = np.minimum(s * out_lo + d_lo, lo_in)
    pad_hi = np.maximum(s * out_hi + d_hi, hi_in)
    padded = np.zeros(tuple(pad_hi - pad_lo + 1) + (x.shape[-1],))
    start = lo_in - pad_lo
    padded[tuple(slice(a, a + n) for a, n in zip(start, grid.shape))] = x
    for k, delta in enumerate(offsets):
        first = s * out_lo + delta - pad_lo
        window = padded[tuple(slice(f, f + s * (n - 1) + 1, s) for f, n in zip(first, n_out))]
        out += window @ w[k]
    return DenseGrid(out, out_lo)


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """``max|a - e| / max|e|`` (absolute when the reference is all zero)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.size == 0:
        return 0.0
    scale = np.abs(expected).max()
    diff = np.abs(actual - expected).max()
    return float(diff / scale) if scale > 0 else float(diff)


def compare_with_oracle(out: SparseTensor, reference: DenseGrid) -> float:
    """Relative error of sparse outputs against the oracle at occupied cells."""
    return relative_error(out.features, reference.at(out.coords))
