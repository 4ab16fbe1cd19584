"""Four executions of the same sparse convolution.

All dataflows consume one :class:`KernelMap` and compute

    out[i] = sum over (j, i) in pairs(delta) of x[j] @ W[delta]

accumulating in float64 and returning the input feature dtype. They differ
only in traversal order and grouping, which the returned stats describe.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from sparseseg.errors import InconsistentMapError, InvalidSpecError
from sparseseg.sparse.kmap import KernelMap, NeighborBitmask, build_bitmasks
from sparseseg.sparse.tensor import ConvSpec, SparseTensor

DEFAULT_GROUP_SIZE = 32

Kernel = Callable[..., tuple[np.ndarray, dict]]


def _check(features: np.ndarray, weights: np.ndarray, kmap: KernelMap):
    if features.ndim != 2 or features.shape[1] != weights.shape[1]:
        raise InvalidSpecError(
            f"features with {features.shape[-1]} channels do not match C_in={weights.shape[1]}"
        )
    if weights.shape[0] != kmap.volume:
        raise InvalidSpecError(f"{weights.shape[0]} weight matrices for {kmap.volume} offsets")
    if features.shape[0] != kmap.n_in:
        raise InconsistentMapError(
            f"kernel map expects {kmap.n_in} input rows, got {features.shape[0]}"
        )


def _base_stats(kmap: KernelMap, c_in: int, c_out: int) -> dict:
    pairs = kmap.total_pairs
    return {"pairs": pairs, "macs": pairs * c_in * c_out}


def gather_scatter(features, weights, kmap: KernelMap, threads: int = 1):
    """Weight-stationary: per offset gather, one GEMM, scatter-add."""
    _check(features, weights, kmap)
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c_in, c_out = w.shape[1:]
    acc = np.zeros((kmap.n_out, c_out))
    live = [k for k in range(kmap.volume) if kmap.in_idx[k].size]

    def partial(k):
        return x[kmap.in_idx[k]] @ w[k]

    if threads > 1 and len(live) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(partial, live))
    else:
        parts = map(partial, live)
    # partial buffers merge in offset order regardless of thread count
    for k, part in zip(live, parts):
        acc[kmap.out_idx[k]] += part
    stats = _base_stats(kmap, c_in, c_out)
    stats.update(
        gather_elements=stats["pairs"] * c_in,
        scatter_elements=stats["pairs"] * c_out,
        gemm_calls=len(live),
    )
    return acc.astype(features.dtype, copy=False), stats


def fetch_on_demand(features, weights, kmap: KernelMap, threads: int = 1, block: int = 4096):
    """Output-stationary: each output accumulates its neighbors in offset order.

    Outputs advance in lockstep over their neighbor slots; slot ``t`` adds the
    t-th existing neighbor of every output that has one.
    """
    _check(features, weights, kmap)
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c_in, c_out = w.shape[1:]
    nbr = kmap.neighbors
    present = nbr >= 0
    degree = present.sum(axis=1)
    # per output: offsets of existing neighbors, left-packed in offset order
    slot_order = np.argsort(~present, axis=1, kind="stable")
    acc = np.zeros((kmap.n_out, c_out))

    def run(rows: np.ndarray):
        for t in range(int(degree[rows].max(initial=0))):
            live = rows[degree[rows] > t]
            k = slot_order[live, t]
            j = nbr[live, k]
            acc[live] += np.matmul(x[j][:, None, :], w[k])[:, 0, :]

    chunks = [np.arange(s, min(s + block, kmap.n_out)) for s in range(0, kmap.n_out, block)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, chunks))  # disjoint output rows per chunk
    else:
        for rows in chunks:
            run(rows)
    stats = _base_stats(kmap, c_in, c_out)
    stats.update(
        fetched_elements=stats["pairs"] * c_in,
        output_writes=int(kmap.n_out) * c_out,
        max_degree=int(degree.max(initial=0)),
    )
    return acc.astype(features.dtype, copy=False), stats


def grouped_symmetric(features, weights, kmap: KernelMap, threads: int = 1, symmetric: bool | None = None):
    """Batch each offset with its negation; the center offset runs alone.

    Only valid when ``|pairs(d)| == |pairs(-d)|`` (stride 1, odd K). Other maps,
    or ``symmetric=False``, fall back to :func:`gather_scatter` with
    ``fallback=True``.
    """
    _check(features, weights, kmap)
    volume = kmap.volume
    sizes = kmap.sizes()
    if symmetric is None:
        symmetric = kmap.offsets.kernel_size % 2 == 1
    if not (symmetric and np.array_equal(sizes, sizes[::-1])):
        out, stats = gather_scatter(features, weights, kmap, threads)
        stats.update(fallback=True, groups=volume)
        return out, stats
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c_in, c_out = w.shape[1:]
    acc = np.zeros((kmap.n_out, c_out))
    center = volume // 2
    groups = 0
    for k in range(center):
        mirror = volume - 1 - k
        groups += 1
        if sizes[k] == 0:
            continue
        batch = np.stack([x[kmap.in_idx[k]], x[kmap.in_idx[mirror]]])
        prod = np.matmul(batch, w[[k, mirror]])
        acc[kmap.out_idx[k]] += prod[0]
        acc[kmap.out_idx[mirror]] += prod[1]
    groups += 1
    if sizes[center]:
        acc[kmap.out_idx[center]] += x[kmap.in_idx[center]] @ w[center]
    stats = _base_stats(kmap, c_in, c_out)
    stats.update(fallback=False, groups=groups)
    return acc.astype(features.dtype, copy=False), stats


def padded_macs(bits: NeighborBitmask, order: np.ndarray, group_size: int, c_in: int, c_out: int) -> int:
    """Sum over consecutive groups of ``|group| * popcount(union mask) * C_in * C_out``."""
    total = 0
    for s in range(0, len(order), group_size):
        rows = order[s : s + group_size]
        total += rows.size * int(bits.bits[rows].any(axis=0).sum())
    return total * c_in * c_out


def implicit_sorted(
    features, weights, kmap: KernelMap, group_size: int = DEFAULT_GROUP_SIZE, threads: int = 1,
    sort: bool = True,
):
    """Implicit GEMM over groups of outputs sorted by neighbor bitmask.

    Every member of a group evaluates every offset in the group's union mask;
    absent neighbors read a zero row.
    """
    if group_size < 1:
        raise InvalidSpecError("group_size must be >= 1")
    _check(features, weights, kmap)
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c_in, c_out = w.shape[1:]
    ks = kmap.offsets.kernel_size
    bits = build_bitmasks(kmap, kmap.n_out, ks, kmap.offsets.ndim)
    order = bits.sort_order() if sort else np.arange(kmap.n_out)
    nbr = np.where(kmap.neighbors >= 0, kmap.neighbors, kmap.n_in)
    x_pad = np.vstack([x, np.zeros((1, c_in))])
    out_sorted = np.zeros((kmap.n_out, c_out))
    for s in range(0, kmap.n_out, group_size):
        rows = order[s : s + group_size]
        union = np.flatnonzero(bits.bits[rows].any(axis=0))
        if union.size == 0:
            continue
        a = x_pad[nbr[np.ix_(rows, union)]].reshape(rows.size, union.size * c_in)
        out_sorted[s : s + rows.size] = a @ w[union].reshape(union.size * c_in, c_out)
    acc = np.empty_like(out_sorted)
    acc[order] = out_sorted
    stats = _base_stats(kmap, c_in, c_out)
    identity = np.arange(kmap.n_out)
    sorted_macs = padded_macs(bits, order if sort else bits.sort_order(), group_size, c_in, c_out)
    unsorted_macs = padded_macs(bits, identity, group_size, c_in, c_out)
    stats.update(
        group_size=group_size,
        padded_macs_sorted=sorted_macs,
        padded_macs_unsorted=unsorted_macs,
        redundant_macs_sorted=sorted_macs - stats["macs"],
        redundant_macs_unsorted=unsorted_macs - stats["macs"],
    )
    return acc.astype(features.dtype, copy=False), stats


KERNELS: dict[str, Kernel] = {
    "gather_scatter": gather_scatter,
    "fetch_on_demand": fetch_on_demand,
    "grouped_symmetric": grouped_symmetric,
    "implicit_sorted": implicit_sorted,
}
DATAFLOWS = tuple(KERNELS)
"""Fixed dataflow order; also the autotuner's tie-break order."""


def applicable(name: str, spec: ConvSpec) -> bool:
    if name == "grouped_symmetric":
        return spec.symmetric
    return name in KERNELS


def _check_spec(x: SparseTensor, spec: ConvSpec, kmap: KernelMap):
    if x.channels != spec.c_in:
        raise InvalidSpecError(f"tensor has {x.channels} channels, spec expects {spec.c_in}")
    if kmap.volume != spec.volume:
        raise InconsistentMapError("kernel map and spec disagree on the kernel volume")
    kmap.validate(len(x))


def run_dataflow(name: str, x: SparseTensor, spec: ConvSpec, kmap: KernelMap, **kwargs):
    """Run a dataflow by name; returns ``(SparseTensor, stats)``."""
    try:
        kernel = KERNELS[name]
    except KeyError:
        raise InvalidSpecError(f"unknown dataflow {name!r}; choose from {DATAFLOWS}") from None
    _check_spec(x, spec, kmap)
    if name == "grouped_symmetric":
        kwargs.setdefault("symmetric", spec.symmetric)
    feats, stats = kernel(x.features, spec.weights, kmap, **kwargs)
    return SparseTensor(kmap.out_coords, feats, x.stride * spec.stride), stats


def conv_gather_scatter(x: SparseTensor, spec: ConvSpec, kmap: KernelMap, threads: int = 1) -> SparseTensor:
    return run_dataflow("gather_scatter", x, spec, kmap, threads=threads)[0]


def conv_fetch_on_demand(x: SparseTensor, spec: ConvSpec, kmap: KernelMap, threads: int = 1) -> SparseTensor:
    return run_dataflow("fetch_on_demand", x, spec, kmap, threads=threads)[0]


def conv_grouped_symmetric(x: SparseTensor, spec: ConvSpec, kmap: KernelMap):
    """Returns ``(SparseTensor, stats)``; ``stats["fallback"]`` marks non-symmetric specs."""
    return run_dataflow("grouped_symmetric", x, spec, kmap)


def conv_implicit_sorted(x: SparseTensor, spec: ConvSpec, kmap: KernelMap, group_size: int = DEFAULT_GROUP_SIZE):
    return run_dataflow("implicit_sorted", x, spec, kmap, group_size=group_size)
