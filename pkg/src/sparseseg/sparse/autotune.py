"""Pick the fastest applicable dataflow for a workload by timing them."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Sequence

from sparseseg.errors import InvalidSpecError
from sparseseg.sparse.dataflows import DATAFLOWS, applicable, run_dataflow
from sparseseg.sparse.kmap import KernelMap, build_kernel_map
from sparseseg.sparse.tensor import ConvSpec, SparseTensor, output_coords


@dataclass(frozen=True)
class AutotuneResult:
    choice: str
    table: dict[str, float]  # dataflow -> median seconds, in DATAFLOWS order


def time_dataflow(name: str, x: SparseTensor, spec: ConvSpec, kmap: KernelMap, repeats: int, **kwargs) -> list[float]:
    """Wall-clock seconds of ``repeats`` runs after one discarded warm-up."""
    run_dataflow(name, x, spec, kmap, **kwargs)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_dataflow(name, x, spec, kmap, **kwargs)
        times.append(max(time.perf_counter() - t0, 1e-9))
    return times


def autotune(
    spec: ConvSpec,
    calibration_input: SparseTensor,
    repeats: int = 3,
    candidates: Sequence[str] | None = None,
    kmap: KernelMap | None = None,
) -> AutotuneResult:
    if repeats < 1:
        raise InvalidSpecError("repeats must be >= 1")
    names = [n for n in DATAFLOWS if (candidates is None or n in candidates) and applicable(n, spec)]
    if not names:
        raise InvalidSpecError("no applicable dataflow among the candidates")
    if kmap is None:
        out = output_coords(calibration_input.coords, spec)
        kmap = build_kernel_map(calibration_input.coords, out, spec)
    table = {
        n: statistics.median(time_dataflow(n, calibration_input, spec, kmap, repeats)) for n in names
    }
    return AutotuneResult(pick_fastest(table), table)


def pick_fastest(table: dict[str, float]) -> str:
    """Smallest time; ties go to the earlier entry in DATAFLOWS order."""
    names = sorted(table, key=lambda n: DATAFLOWS.index(n) if n in DATAFLOWS else len(DATAFLOWS))
    return min(names, key=lambda n: table[n])
