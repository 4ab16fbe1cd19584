"""Kernel maps: which input row feeds which output row through which offset."""

from __future__ import annotations

from functools import cached_property

import numpy as np

from sparseseg.errors import InconsistentMapError, InvalidTensorError
from sparseseg.sparse.tensor import ConvSpec, OffsetSet, lex_order_violations, sort_coords


class CoordIndex:
    """Associative lookup from integer coordinates to row numbers.

    Coordinates are packed into mixed-radix int64 keys over the bounding box of
    the indexed set; queries outside the box never match.
    """

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64)
        self.ndim = coords.shape[1]
        if coords.shape[0] == 0:
            self.lo = np.zeros(self.ndim, dtype=np.int64)
            self.hi = -np.ones(self.ndim, dtype=np.int64)
        else:
            self.lo = coords.min(axis=0)
            self.hi = coords.max(axis=0)
        span = np.maximum(self.hi - self.lo + 1, 1)
        if np.prod(span.astype(np.float64)) >= 2.0**62:
            raise InvalidTensorError("coordinate extent too large to index")
        self.radix = np.concatenate([np.cumprod(span[::-1])[::-1][1:], [1]]).astype(np.int64)
        keys = (coords - self.lo) @ self.radix
        self.perm = np.argsort(keys, kind="stable")
        self.keys = keys[self.perm]

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row of each query coordinate, or -1 when absent."""
        query = np.asarray(query, dtype=np.int64).reshape(-1, self.ndim)
        out = np.full(query.shape[0], -1, dtype=np.int64)
        if self.keys.size == 0 or query.shape[0] == 0:
            return out
        inside = np.all((query >= self.lo) & (query <= self.hi), axis=1)
        qk = (query[inside] - self.lo) @ self.radix
        pos = np.searchsorted(self.keys, qk)
        pos = np.minimum(pos, self.keys.size - 1)
        hit = self.keys[pos] == qk
        rows = np.where(hit, self.perm[pos], -1)
        out[inside] = rows
        return out


class KernelMap:
    """Per-offset ``(input row, output row)`` pairs for one convolution.

    ``in_idx[k]`` / ``out_idx[k]`` list the pairs of offset ``k``, ordered by
    output row. Within one offset each output row occurs at most once.
    """

    def __init__(
        self,
        offsets: OffsetSet,
        in_idx: list[np.ndarray],
        out_idx: list[np.ndarray],
        n_in: int,
        out_coords: np.ndarray,
    ):
        if len(in_idx) != len(offsets) or len(out_idx) != len(offsets):
            raise InconsistentMapError("one pair list per kernel offset is required")
        self.offsets = offsets
        self.in_idx = [np.asarray(a, dtype=np.int64) for a in in_idx]
        self.out_idx = [np.asarray(a, dtype=np.int64) for a in out_idx]
        self.n_in = int(n_in)
        self.out_coords = np.asarray(out_coords, dtype=np.int64)

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def volume(self) -> int:
        return len(self.offsets)

    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.in_idx], dtype=np.int64)

    @property
    def total_pairs(self) -> int:
        return int(self.sizes().sum())

    def pairs(self, delta) -> list[tuple[int, int]]:
        k = self.offsets.index(delta)
        return list(zip(self.in_idx[k].tolist(), self.out_idx[k].tolist()))

    @cached_property
    def neighbors(self) -> np.ndarray:
        """Dense ``(n_out, K**N)`` table of input rows, -1 where absent."""
        table = np.full((self.n_out, self.volume), -1, dtype=np.int64)
        for k in range(self.volume):
            table[self.out_idx[k], k] = self.in_idx[k]
        return table

    def transposed(self, in_coords: np.ndarray) -> KernelMap:
        """Map of the transposed convolution that scatters back onto ``in_coords``."""
        in_coords = np.asarray(in_coords, dtype=np.int64)
        if in_coords.shape[0] != self.n_in:
            raise InconsistentMapError("coordinate count does not match the map's inputs")
        new_in, new_out = [], []
        for a, b in zip(self.in_idx, self.out_idx):
            order = np.argsort(a, kind="stable")
            new_in.append(b[order])
            new_out.append(a[order])
        return KernelMap(self.offsets, new_in, new_out, self.n_out, in_coords)

    def validate(self, n_in: int | None = None):
        if n_in is not None and n_in != self.n_in:
            raise InconsistentMapError(f"map built for {self.n_in} inputs, got {n_in}")
        for a, b in zip(self.in_idx, self.out_idx):
            if a.shape != b.shape:
                raise InconsistentMapError("pair lists differ in length")
            if a.size and (a.min() < 0 or a.max() >= self.n_in):
                raise InconsistentMapError("input index out of range")
            if b.size and (b.min() < 0 or b.max() >= self.n_out):
                raise InconsistentMapError("output index out of range")


def _check_unique(coords: np.ndarray, what: str):
    if coords.shape[0] < 2:
        return
    dup, unsorted = lex_order_violations(coords)
    if unsorted:
        dup = lex_order_violations(coords[sort_coords(coords)])[0]
    if dup:
        raise InvalidTensorError(f"duplicate {what} coordinates")


def build_kernel_map(in_coords: np.ndarray, out_coords: np.ndarray, spec: ConvSpec) -> KernelMap:
    """Pair (j, i) belongs to offset delta iff ``in[j] == stride * out[i] + delta``."""
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, spec.ndim)
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, spec.ndim)
    _check_unique(in_coords, "input")
    _check_unique(out_coords, "output")
    offsets = spec.offsets()
    index = CoordIndex(in_coords)
    base = spec.stride * out_coords
    rows = np.arange(out_coords.shape[0], dtype=np.int64)
    in_idx, out_idx = [], []
    for delta in offsets.offsets:
        hit = index.lookup(base + delta)
        found = hit >= 0
        in_idx.append(hit[found])
        out_idx.append(rows[found])
    return KernelMap(offsets, in_idx, out_idx, in_coords.shape[0], out_coords)


class NeighborBitmask:
    """Per output row, bit ``b`` is set iff the neighbor at offset ``b`` exists."""

    def __init__(self, bits: np.ndarray):
        self.bits = np.asarray(bits, dtype=bool)

    def __len__(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def popcount(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def values(self) -> list[int]:
        """Masks as Python integers (K**N may exceed 64 bits)."""
        weights = [1 << b for b in range(self.width)]
        return [sum(w for w, on in zip(weights, row) if on) for row in self.bits.tolist()]

    def sort_order(self) -> np.ndarray:
        """Rows by descending mask value, ties by ascending row."""
        n = len(self)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        # lexsort's last key is primary: the most significant bit goes last
        keys = [np.arange(n)] + [~self.bits[:, b] for b in range(self.width)]
        return np.lexsort(keys)


def build_bitmasks(kmap: KernelMap, out_count: int, kernel_size: int, ndim: int) -> NeighborBitmask:
    width = kernel_size**ndim
    if width != kmap.volume or out_count != kmap.n_out:
        raise InconsistentMapError("bitmask geometry does not match the kernel map")
    bits = np.zeros((out_count, width), dtype=bool)
    for k in range(width):
        bits[kmap.out_idx[k], k] = True
    return NeighborBitmask(bits)
