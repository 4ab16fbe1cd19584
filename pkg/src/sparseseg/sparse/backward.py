"""Gradients of the sparse convolution with respect to inputs and weights."""

from __future__ import annotations

import numpy as np

from sparseseg.errors import InconsistentMapError
from sparseseg.sparse.kmap import KernelMap
from sparseseg.sparse.tensor import ConvSpec, SparseTensor


def conv_backward_arrays(grad_out: np.ndarray, features: np.ndarray, weights: np.ndarray, kmap: KernelMap):
    """Return ``(grad_x, grad_W)`` for ``out = conv(features, weights, kmap)``.

    Same dtype rule as the forward pass: float64 accumulation, input dtype out.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.shape != (kmap.n_out, w.shape[2]):
        raise InconsistentMapError(
            f"gradient shape {g.shape} does not match ({kmap.n_out}, {w.shape[2]})"
        )
    if x.shape != (kmap.n_in, w.shape[1]):
        raise InconsistentMapError(
            f"input shape {x.shape} does not match ({kmap.n_in}, {w.shape[1]})"
        )
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(w)
    for k in range(kmap.volume):
        src, dst = kmap.in_idx[k], kmap.out_idx[k]
        if src.size == 0:
            continue
        g_k = g[dst]
        grad_x[src] += g_k @ w[k].T
        grad_w[k] = x[src].T @ g_k
    dtype = np.result_type(features.dtype, np.float32)
    return grad_x.astype(dtype, copy=False), grad_w.astype(np.asarray(weights).dtype, copy=False)


def conv_backward(grad_out, x: SparseTensor, spec: ConvSpec, kmap: KernelMap):
    if isinstance(grad_out, SparseTensor):
        if not np.array_equal(grad_out.coords, kmap.out_coords):
            raise InconsistentMapError("gradient coordinates differ from the map's outputs")
        grad_out = grad_out.features
    if kmap.n_in != len(x):
        raise InconsistentMapError(f"map built for {kmap.n_in} inputs, tensor has {len(x)}")
    return conv_backward_arrays(grad_out, x.features, spec.weights, kmap)
