"""Command implementations behind the CLI and the report writer.

Each ``cmd_*`` takes a :class:`RunConfig` and returns a :class:`Report`; the
CLI decides where the report goes. Reports keep insertion order so that
re-emitting one is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import statistics
import time
import warnings
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from threadpoolctl import threadpool_limits

import sparseseg
from sparseseg.augment import lasermix, frustummix, polarmix_scene, sample_global_transform
from sparseseg.config import RunConfig
from sparseseg.errors import EquivalenceError, InvalidInputError, UndefinedMetricError
from sparseseg.ingest import SYNTH_CLASSES, LabelRemap, SynthDataset, iter_kitti, write_labels, write_scan
from sparseseg.metrics import ConfusionMatrix, acc_per_class, iou_per_class, macc, miou
from sparseseg.pointcloud import PointCloud, apply_transform
from sparseseg.rasterize import occupancy, voxelize
from sparseseg.segmentor import (
    Segmentor,
    TrainState,
    batch_loss_and_grads,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from sparseseg.sparse.autotune import pick_fastest
from sparseseg.sparse.dataflows import DATAFLOWS, KERNELS
from sparseseg.sparse.kmap import build_kernel_map
from sparseseg.sparse.oracle import relative_error
from sparseseg.sparse.tensor import ConvSpec, output_coords
from sparseseg.tta import enumerate_variants, tta_predict


@dataclass
class Report:
    kind: str
    fields: dict = field(default_factory=dict)
    columns: tuple[str, ...] = ()
    table: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.fields, "columns": list(self.columns), "table": self.table}


# ---------------------------------------------------------------------------
# report emission


def _clean(value):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python."""
    if isinstance(value, Mapping):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _cell(value) -> str:
    value = _clean(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value, separators=(",", ":"))
    return str(value)


def emit_report(report: Report, fmt: str = "json", path: str | Path | None = None) -> str:
    """Render ``report`` as JSON (``json``) or its table as CSV (``csv``)."""
    if fmt == "json":
        text = json.dumps(_clean(report.to_dict()), indent=2, allow_nan=False) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(report.columns)
        for row in report.table:
            writer.writerow([_cell(row.get(c)) for c in report.columns])
        text = buf.getvalue()
    else:
        raise InvalidInputError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# shared plumbing


def environment(cfg: RunConfig) -> dict:
    return {
        "thread_mode": "deterministic" if cfg.threads == 1 else "parallel",
        "threads": cfg.threads,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "sparseseg": sparseseg.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
    }


def thread_scope(cfg: RunConfig):
    """Pin BLAS to one thread in deterministic mode."""
    return threadpool_limits(limits=1) if cfg.threads == 1 else nullcontext()


def resolve(cfg: RunConfig, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(cfg.out_dir) / p


def _label_table(cfg: RunConfig) -> LabelRemap:
    if cfg.dataset.label_map:
        return LabelRemap.from_yaml(cfg.dataset.label_map)
    return LabelRemap.semantic_kitti()


def train_scenes(cfg: RunConfig) -> list[PointCloud]:
    ds = cfg.dataset
    if ds.source == "kitti":
        return list(iter_kitti(ds.kitti_root, ds.train_sequences, _label_table(cfg)))
    return SynthDataset(ds.synthetic, ds.train_scenes).scenes()


def eval_scenes(cfg: RunConfig) -> list[PointCloud]:
    ds = cfg.dataset
    if ds.source == "kitti":
        return list(iter_kitti(ds.kitti_root, ds.eval_sequences, _label_table(cfg)))
    base = replace(ds.synthetic, seed=ds.synthetic.seed + ds.eval_seed_offset)
    return SynthDataset(base, ds.eval_scenes).scenes()


def class_names(cfg: RunConfig) -> list[str]:
    n = cfg.segmentor.num_classes
    if cfg.dataset.source == "synthetic" and n == len(SYNTH_CLASSES):
        return list(SYNTH_CLASSES)
    if cfg.dataset.source == "kitti":
        names = list(_label_table(cfg).class_names)
        if len(names) == n:
            return names
    return [str(c) for c in range(n)]


# ---------------------------------------------------------------------------
# bench-dataflows

BENCH_COLUMNS = (
    "dataflow", "median_s", "p10_s", "p90_s", "scans_per_s", "train_iters_per_s",
    "pairs", "macs", "padded_macs", "redundant_macs", "gather_elements", "scatter_elements",
    "fallback", "max_deviation",
)


def _workload(cfg: RunConfig):
    """Voxelized synthetic scenes with seeded features plus one seeded conv spec."""
    b = cfg.bench
    rng = np.random.default_rng(cfg.seed)
    scenes = SynthDataset(replace(cfg.dataset.synthetic, seed=cfg.seed), b.scenes).scenes()
    vox = cfg.segmentor.voxel
    ndim = vox.ndim
    volume = b.kernel_size**ndim
    bound = np.sqrt(1.0 / (volume * b.c_in))
    weights = rng.uniform(-bound, bound, size=(volume, b.c_in, b.c_out))
    spec = ConvSpec(b.kernel_size, ndim, b.stride, weights, b.submanifold)
    items = []
    occ = []
    for scene in scenes:
        coords, _ = voxelize(scene, vox)
        occ.append(occupancy(coords, vox))
        feats = rng.standard_normal((coords.shape[0], b.c_in))
        out = output_coords(coords, spec)
        items.append((feats, build_kernel_map(coords, out, spec)))
    return spec, items, scenes, occ


def _percentile(times, q):
    return float(np.percentile(np.asarray(times), q))


def _kernel_kwargs(name: str, cfg: RunConfig, spec: ConvSpec) -> dict:
    kw = {"threads": cfg.threads}
    if name == "grouped_symmetric":
        kw["symmetric"] = spec.symmetric
    if name == "implicit_sorted":
        kw["group_size"] = cfg.bench.group_size
    return kw


def cmd_bench_dataflows(cfg: RunConfig, kernels: Mapping[str, Callable] | None = None) -> Report:
    """Verify cross-dataflow agreement, then time each selected dataflow.

    ``kernels`` overrides the dataflow implementations (used to test the gate).
    """
    cfg.validate()
    kernels = dict(KERNELS if kernels is None else kernels)
    b = cfg.bench
    auto = "auto" in b.dataflows
    names = list(DATAFLOWS) if auto else [n for n in DATAFLOWS if n in b.dataflows]
    with thread_scope(cfg):
        spec, items, scenes, occ = _workload(cfg)
        outputs = {n: [] for n in names}
        stats = {n: {} for n in names}
        for feats, kmap in items:
            for n in names:
                out, st = kernels[n](feats, spec.weights, kmap, **_kernel_kwargs(n, cfg, spec))
                outputs[n].append(out)
                for key, value in st.items():
                    if isinstance(value, bool):
                        stats[n][key] = stats[n].get(key, False) or value
                    elif key in ("group_size", "max_degree", "groups"):
                        stats[n][key] = max(stats[n].get(key, 0), value)
                    else:
                        stats[n][key] = stats[n].get(key, 0) + value
        # correctness gates performance: compare before any timing
        reference = [
            KERNELS["gather_scatter"](feats, spec.weights, kmap)[0] for feats, kmap in items
        ]
        deviation = {}
        for n in names:
            deviation[n] = max(relative_error(o, r) for o, r in zip(outputs[n], reference))
            if not deviation[n] <= b.tolerance:
                raise EquivalenceError(n, deviation[n], b.tolerance)

        rows, medians = [], {}
        for n in names:
            kw = _kernel_kwargs(n, cfg, spec)

            def run_all():
                for feats, kmap in items:
                    kernels[n](feats, spec.weights, kmap, **kw)

            run_all()  # warm-up, discarded
            times = []
            for _ in range(b.repeats):
                t0 = time.perf_counter()
                run_all()
                times.append(max(time.perf_counter() - t0, 1e-9))
            medians[n] = statistics.median(times)
            st = stats[n]
            padded = st.get("padded_macs_sorted")
            rows.append({
                "dataflow": n,
                "median_s": medians[n],
                "p10_s": _percentile(times, 10),
                "p90_s": _percentile(times, 90),
                "scans_per_s": len(items) / medians[n],
                "train_iters_per_s": _train_rate(cfg, n, scenes[0]),
                "pairs": st["pairs"],
                "macs": st["macs"],
                "padded_macs": padded,
                "redundant_macs": st.get("redundant_macs_sorted"),
                "gather_elements": st.get("gather_elements", st.get("fetched_elements")),
                "scatter_elements": st.get("scatter_elements", st.get("output_writes")),
                "fallback": st.get("fallback"),
                "max_deviation": deviation[n],
            })
    implicit = stats.get("implicit_sorted", {})
    fields = {
        "environment": environment(cfg),
        "workload": {
            "scenes": len(items),
            "voxels": [int(k.n_in) for _, k in items],
            "kernel_size": b.kernel_size,
            "stride": b.stride,
            "submanifold": b.submanifold,
            "c_in": b.c_in,
            "c_out": b.c_out,
            "group_size": b.group_size,
            "repeats": b.repeats,
            "occupancy": occ,
            "map_sizes": [int(s) for s in np.sum([k.sizes() for _, k in items], axis=0)],
        },
        "padded_macs_unsorted": implicit.get("padded_macs_unsorted"),
        "padded_macs_sorted": implicit.get("padded_macs_sorted"),
        "tolerance": b.tolerance,
    }
    if auto:
        fields["autotune_choice"] = pick_fastest(medians)
    return Report("bench-dataflows", fields, BENCH_COLUMNS, rows)


def _train_rate(cfg: RunConfig, dataflow: str, scene: PointCloud) -> float | None:
    steps = cfg.bench.train_steps
    if steps <= 0:
        return None
    seg = replace(cfg.segmentor, dataflow=dataflow)
    params = init_params(seg)
    t0 = time.perf_counter()
    for _ in range(steps):
        batch_loss_and_grads(params, [scene], seg)
    return steps / max(time.perf_counter() - t0, 1e-9)


# ---------------------------------------------------------------------------
# train


def make_batches(cfg: RunConfig, scenes: list[PointCloud]):
    """Deterministic batch source: step -> list of (augmented) labeled clouds."""
    tc = cfg.train
    policy = tc.policy

    def batch(step: int) -> list[PointCloud]:
        rng = np.random.default_rng([cfg.seed, step])
        picks = rng.integers(len(scenes), size=tc.batch_size)
        clouds = [scenes[i] for i in picks]
        if not tc.augment:
            return clouds
        if policy.global_aug:
            clouds = [apply_transform(c, sample_global_transform(policy.ranges, rng)) for c in clouds]
        mixed = []
        for c in clouds:
            partner = scenes[int(rng.integers(len(scenes)))]
            result = policy.mix.apply(c, partner, rng)
            mixed.append(c if result is None else result.mixed_a)
        return mixed

    return batch


TRAIN_COLUMNS = ("step", "loss", "seconds")


def evaluate(segmentor: Segmentor, scenes: list[PointCloud], tta=None) -> ConfusionMatrix:
    cm = ConfusionMatrix(segmentor.cfg.num_classes)
    for scene in scenes:
        pred = segmentor.predict(scene) if tta is None else tta_predict(scene, segmentor, tta)
        cm.accumulate(pred, scene.labels)
    return cm


def _means(cm: ConfusionMatrix) -> tuple[float | None, float | None, list[str]]:
    notes = []
    try:
        m_iou = miou(cm)[1]
    except UndefinedMetricError as exc:
        m_iou = None
        notes.append(str(exc))
    try:
        m_acc = macc(cm)[1]
    except UndefinedMetricError as exc:
        m_acc = None
        notes.append(str(exc))
    return m_iou, m_acc, notes


def cmd_train(cfg: RunConfig) -> Report:
    """Train for ``train.steps`` steps, write the checkpoint, report the loss trace."""
    cfg.validate()
    seg = cfg.segmentor
    with thread_scope(cfg):
        scenes = train_scenes(cfg)
        if not scenes:
            raise InvalidInputError("no training scenes")
        batches = make_batches(cfg, scenes)
        state = TrainState.create(seg)
        rows = []
        for step in range(cfg.train.steps):
            batch = batches(step)
            t0 = time.perf_counter()
            state, value = train_step(batch, state, seg)
            rows.append({"step": step, "loss": value, "seconds": max(time.perf_counter() - t0, 1e-9)})
        ckpt = resolve(cfg, cfg.train.checkpoint)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, seg, state.params)
        cm = evaluate(Segmentor(seg, state.params), eval_scenes(cfg))
    m_iou, m_acc, notes = _means(cm)
    total = sum(r["seconds"] for r in rows)
    fields = {
        "environment": environment(cfg),
        "steps": cfg.train.steps,
        "checkpoint": str(ckpt),
        "initial_loss": rows[0]["loss"] if rows else None,
        "final_loss": rows[-1]["loss"] if rows else None,
        "iters_per_s": len(rows) / total if rows else None,
        "heldout_miou": m_iou,
        "heldout_macc": m_acc,
        "warnings": notes,
    }
    return Report("train", fields, TRAIN_COLUMNS, rows)


# ---------------------------------------------------------------------------
# eval

EVAL_COLUMNS = ("class_id", "name", "iou", "acc", "support")


def cmd_eval(cfg: RunConfig) -> Report:
    """Load the checkpoint, predict (optionally with TTA), report point-level metrics."""
    cfg.validate()
    ckpt = resolve(cfg, cfg.eval.checkpoint)
    if not ckpt.is_file():
        raise InvalidInputError(f"checkpoint {str(ckpt)!r} does not exist; run train first")
    seg_cfg, params = load_checkpoint(ckpt, expect=cfg.segmentor)
    model = Segmentor(seg_cfg, params)
    variants = enumerate_variants(cfg.eval.tta)
    with thread_scope(cfg):
        scenes = eval_scenes(cfg)
        t0 = time.perf_counter()
        cm = evaluate(model, scenes, None if len(variants) == 1 else variants)
        elapsed = max(time.perf_counter() - t0, 1e-9)
    m_iou, m_acc, notes = _means(cm)
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    ious, accs = iou_per_class(cm), acc_per_class(cm)
    support = cm.counts.sum(axis=1)
    names = class_names(cfg)
    rows = [
        {"class_id": c, "name": names[c], "iou": float(ious[c]), "acc": float(accs[c]),
         "support": int(support[c])}
        for c in range(cm.num_classes)
    ]
    fields = {
        "environment": environment(cfg),
        "checkpoint": str(ckpt),
        "scans": len(scenes),
        "points": int(sum(len(s) for s in scenes)),
        "scored_points": cm.total,
        "variant_count": len(variants),
        "elapsed_s": elapsed,
        "scans_per_s": len(scenes) / elapsed,
        "miou": m_iou,
        "macc": m_acc,
        "warnings": notes,
    }
    return Report("eval", fields, EVAL_COLUMNS, rows)


# ---------------------------------------------------------------------------
# augment-preview

PREVIEW_COLUMNS = ("output", "points", "from_a", "from_b", "path")


def cmd_augment_preview(cfg: RunConfig) -> Report:
    """Mix the first two training scenes and write both outputs as scan/label files."""
    cfg.validate()
    scenes = train_scenes(cfg)
    if len(scenes) < 2:
        raise InvalidInputError("augment-preview needs two scenes")
    a, b = scenes[0], scenes[1]
    p = cfg.preview
    if p.operator == "lasermix":
        result = lasermix(a, b, p.axis, p.bands, seed=cfg.seed)
    elif p.operator == "frustummix":
        result = frustummix(a, b, p.axis, p.bands, seed=cfg.seed)
    else:
        result = polarmix_scene(a, b, p.sector_start, p.sector_width, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, cloud, src in (
        ("mixed_a", result.mixed_a, result.sources_a),
        ("mixed_b", result.mixed_b, result.sources_b),
    ):
        (out / f"{name}.bin").write_bytes(write_scan(cloud))
        (out / f"{name}.label").write_bytes(write_labels(cloud.labels.astype(np.uint32)))
        rows.append({
            "output": name,
            "points": len(cloud),
            "from_a": int((src[:, 0] == 0).sum()),
            "from_b": int((src[:, 0] == 1).sum()),
            "path": str(out / f"{name}.bin"),
        })
    part = result.partition
    fields = {
        "environment": environment(cfg),
        "operator": part.operator,
        "axis": part.axis,
        "count": part.count,
        "boundaries": [float(v) for v in part.boundaries],
        "parity": part.parity,
    }
    return Report("augment-preview", fields, PREVIEW_COLUMNS, rows)


COMMANDS = {
    "bench-dataflows": cmd_bench_dataflows,
    "train": cmd_train,
    "eval": cmd_eval,
    "augment-preview": cmd_augment_preview,
}
