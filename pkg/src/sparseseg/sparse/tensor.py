"""Sparse tensors, kernel offsets and convolution specs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from sparseseg.errors import InvalidSpecError, InvalidTensorError


def lex_order_violations(coords: np.ndarray) -> tuple[bool, bool]:
    """Return ``(has_duplicates, is_unsorted)`` for a row-wise coordinate array."""
    if coords.shape[0] < 2:
        return False, False
    diff = np.diff(coords, axis=0)
    nz = diff != 0
    dup = ~nz.any(axis=1)
    first = np.argmax(nz, axis=1)
    lead = diff[np.arange(diff.shape[0]), first]
    return bool(dup.any()), bool((lead[~dup] < 0).any())


def sort_coords(coords: np.ndarray) -> np.ndarray:
    """Permutation that sorts coordinate rows lexicographically."""
    if coords.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(coords.T[::-1])


@dataclass(frozen=True)
class SparseTensor:
    """Sorted, duplicate-free integer coordinates with one feature row each."""

    coords: np.ndarray
    features: np.ndarray
    stride: int = 1

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.ndim != 2:
            raise InvalidTensorError("coords must be a 2-D array")
        feats = np.asarray(self.features)
        if feats.dtype.kind != "f":
            feats = feats.astype(np.float32)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise InvalidTensorError(
                f"features shape {feats.shape} does not match {coords.shape[0]} coordinates"
            )
        dup, unsorted = lex_order_violations(coords)
        if dup:
            raise InvalidTensorError("duplicate coordinates in sparse tensor")
        if unsorted:
            raise InvalidTensorError("sparse tensor coordinates must be sorted")
        if self.stride < 1:
            raise InvalidTensorError("tensor stride must be positive")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @classmethod
    def from_unsorted(cls, coords, features, stride: int = 1) -> SparseTensor:
        coords = np.asarray(coords, dtype=np.int64)
        perm = sort_coords(coords)
        return cls(coords[perm], np.asarray(features)[perm], stride)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def ndim(self) -> int:
        return self.coords.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def replace_features(self, features: np.ndarray) -> SparseTensor:
        return SparseTensor(self.coords, features, self.stride)


@dataclass(frozen=True)
class OffsetSet:
    kernel_size: int
    ndim: int
    offsets: np.ndarray  # (K**N, N), lexicographic

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def index(self, delta) -> int:
        hits = np.flatnonzero(np.all(self.offsets == np.asarray(delta), axis=1))
        if hits.size == 0:
            raise KeyError(tuple(delta))
        return int(hits[0])

    def negation_index(self) -> np.ndarray:
        """For odd K, position of -delta for every delta (reversal of lex order)."""
        if self.kernel_size % 2 == 0:
            raise InvalidSpecError("offset set is not symmetric for even kernel sizes")
        return np.arange(len(self))[::-1].copy()


def enumerate_offsets(kernel_size: int, ndim: int) -> OffsetSet:
    """Centered offsets for odd K, non-negative ``[0, K-1]`` offsets for even K."""
    if kernel_size < 1 or ndim < 1:
        raise InvalidSpecError(f"invalid kernel size {kernel_size} / dimension {ndim}")
    lo = -(kernel_size - 1) // 2 if kernel_size % 2 else 0
    axis = range(lo, lo + kernel_size)
    offsets = np.array(list(itertools.product(axis, repeat=ndim)), dtype=np.int64)
    return OffsetSet(kernel_size, ndim, offsets.reshape(-1, ndim))


@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry plus the weight bank ``weights[k]`` (C_in x C_out) per offset."""

    kernel_size: int
    ndim: int
    stride: int
    weights: np.ndarray
    submanifold: bool = False

    def __post_init__(self):
        if self.kernel_size < 1 or self.ndim < 1:
            raise InvalidSpecError("kernel size and dimension must be positive")
        if self.stride < 1:
            raise InvalidSpecError("stride must be >= 1")
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[0] != self.kernel_size**self.ndim:
            raise InvalidSpecError(
                f"weights must have shape (K**N, C_in, C_out) = ({self.kernel_size**self.ndim}, ...),"
                f" got {w.shape}"
            )
        if self.submanifold and (self.stride != 1 or self.kernel_size % 2 == 0):
            raise InvalidSpecError("submanifold convolution needs stride 1 and an odd kernel")
        object.__setattr__(self, "weights", w)

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    @property
    def volume(self) -> int:
        return self.kernel_size**self.ndim

    @property
    def symmetric(self) -> bool:
        """Stride-1, odd-K kernels pair every offset with its negation."""
        return self.stride == 1 and self.kernel_size % 2 == 1

    def offsets(self) -> OffsetSet:
        return enumerate_offsets(self.kernel_size, self.ndim)

    def with_weights(self, weights: np.ndarray) -> ConvSpec:
        return ConvSpec(self.kernel_size, self.ndim, self.stride, weights, self.submanifold)


def output_coords(in_coords: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Active output cells.

    Submanifold: identical to the input. Otherwise every ``c_out`` with
    ``c_in = stride * c_out + delta`` for some input ``c_in`` and offset ``delta``.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, spec.ndim)
    if spec.submanifold:
        return in_coords.copy()
    if in_coords.shape[0] == 0:
        return np.zeros((0, spec.ndim), dtype=np.int64)
    cands = []
    s = spec.stride
    for delta in spec.offsets().offsets:
        shifted = in_coords - delta
        ok = np.all(shifted % s == 0, axis=1)
        cands.append(shifted[ok] // s)
    return np.unique(np.concatenate(cands), axis=0)
