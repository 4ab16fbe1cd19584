"""Sparse convolution engine: tensors, kernel maps, dataflows and gradients."""

from sparseseg.sparse.autotune import AutotuneResult, autotune, pick_fastest
from sparseseg.sparse.backward import conv_backward, conv_backward_arrays
from sparseseg.sparse.dataflows import (
    DATAFLOWS,
    DEFAULT_GROUP_SIZE,
    KERNELS,
    applicable,
    conv_fetch_on_demand,
    conv_gather_scatter,
    conv_grouped_symmetric,
    conv_implicit_sorted,
    run_dataflow,
)
from sparseseg.sparse.kmap import (
    CoordIndex,
    KernelMap,
    NeighborBitmask,
    build_bitmasks,
    build_kernel_map,
)
from sparseseg.sparse.oracle import (
    DenseGrid,
    compare_with_oracle,
    conv_dense_oracle,
    densify,
    relative_error,
)
from sparseseg.sparse.tensor import (
    ConvSpec,
    OffsetSet,
    SparseTensor,
    enumerate_offsets,
    output_coords,
)

__all__ = [
    "AutotuneResult",
    "ConvSpec",
    "CoordIndex",
    "DATAFLOWS",
    "DEFAULT_GROUP_SIZE",
    "DenseGrid",
    "KERNELS",
    "KernelMap",
    "NeighborBitmask",
    "OffsetSet",
    "SparseTensor",
    "applicable",
    "autotune",
    "build_bitmasks",
    "build_kernel_map",
    "compare_with_oracle",
    "conv_backward",
    "conv_backward_arrays",
    "conv_dense_oracle",
    "conv_fetch_on_demand",
    "conv_gather_scatter",
    "conv_grouped_symmetric",
    "conv_implicit_sorted",
    "densify",
    "enumerate_offsets",
    "output_coords",
    "pick_fastest",
    "relative_error",
    "run_dataflow",
]
