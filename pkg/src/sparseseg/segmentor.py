"""A miniature voxel U-Net segmentor with hand-written reverse pass.

Pipeline: voxelize -> mean-pool voxel features -> linear stem ->
per level [stride-2 downsample (levels > 0) + submanifold residual blocks] ->
per level, coarse to fine [transposed upsample onto the cached coordinates,
skip concatenation, submanifold fuse conv] -> linear head -> devoxelize.

Every convolution has a bias; every hidden activation is a ReLU.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from sparseseg.errors import DivergenceError, IncompatibleCheckpointError, InvalidInputError
from sparseseg.pointcloud import IGNORE, PointCloud
from sparseseg.rasterize import PointToCellMap, VoxelizationConfig, devoxelize, pool_mean, voxelize
from sparseseg.sparse.backward import conv_backward_arrays
from sparseseg.sparse.dataflows import KERNELS
from sparseseg.sparse.kmap import KernelMap, build_kernel_map
from sparseseg.sparse.tensor import ConvSpec, output_coords

POSITION_SCALE = 10.0  # meters per unit of absolute position feature


def default_voxel_config() -> VoxelizationConfig:
    return VoxelizationConfig(
        "cartesian", (-22.0, -22.0, -2.5), (22.0, 22.0, 5.0), (0.4, 0.4, 0.4), "drop"
    )


@dataclass(frozen=True)
class SegmentorConfig:
    voxel: VoxelizationConfig = field(default_factory=default_voxel_config)
    widths: tuple[int, ...] = (8, 16)
    depth: int = 1
    num_classes: int = 3
    features: Literal["absolute", "relative"] = "absolute"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    dataflow: str = "gather_scatter"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1 or self.depth < 0:
            raise InvalidInputError("widths must be positive and depth non-negative")
        if self.num_classes < 2:
            raise InvalidInputError("need at least two classes")
        if self.features not in ("absolute", "relative"):
            raise InvalidInputError(f"unknown feature mode {self.features!r}")
        if self.dataflow not in KERNELS:
            raise InvalidInputError(f"unknown dataflow {self.dataflow!r}")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def in_channels(self) -> int:
        return 4 if self.features == "absolute" else self.voxel.ndim + 1

    def architecture(self) -> dict:
        """Fields that determine parameter shapes and semantics."""
        d = self.to_dict()
        return {k: d[k] for k in ("voxel", "widths", "depth", "num_classes", "features")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["voxel"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.voxel).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SegmentorConfig:
        d = dict(d)
        if "voxel" in d and isinstance(d["voxel"], dict):
            v = {k: tuple(x) if isinstance(x, list) else x for k, x in d["voxel"].items()}
            d["voxel"] = VoxelizationConfig(**v)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: SegmentorConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    n = cfg.voxel.ndim
    k3, k2 = 3**n, 2**n
    w = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {
        "stem.w": (cfg.in_channels, w[0]),
        "stem.b": (w[0],),
    }
    for lvl in range(cfg.levels):
        if lvl > 0:
            shapes[f"down{lvl}.w"] = (k2, w[lvl - 1], w[lvl])
            shapes[f"down{lvl}.b"] = (w[lvl],)
        for b in range(cfg.depth):
            for c in (1, 2):
                shapes[f"enc{lvl}.block{b}.conv{c}.w"] = (k3, w[lvl], w[lvl])
                shapes[f"enc{lvl}.block{b}.conv{c}.b"] = (w[lvl],)
    for lvl in range(cfg.levels - 2, -1, -1):
        shapes[f"up{lvl}.w"] = (k2, w[lvl + 1], w[lvl])
        shapes[f"up{lvl}.b"] = (w[lvl],)
        shapes[f"fuse{lvl}.w"] = (k3, 2 * w[lvl], w[lvl])
        shapes[f"fuse{lvl}.b"] = (w[lvl],)
    shapes["head.w"] = (w[0], cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: SegmentorConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights uniform in +-sqrt(1 / (kernel volume * C_in)); biases zero."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = shape[0] * shape[1] if len(shape) == 3 else shape[0]
        bound = np.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# forward / backward


def _geometry(kernel_size: int, ndim: int, stride: int, submanifold: bool) -> ConvSpec:
    return ConvSpec(kernel_size, ndim, stride, np.zeros((kernel_size**ndim, 0, 0)), submanifold)


@dataclass
class Hierarchy:
    """Cached coordinates and kernel maps of every level."""

    coords: list[np.ndarray]
    sub_maps: list[KernelMap]
    down_maps: list[KernelMap | None]
    up_maps: list[KernelMap | None]


def build_hierarchy(coords0: np.ndarray, levels: int) -> Hierarchy:
    n = coords0.shape[1]
    sub = _geometry(3, n, 1, True)
    down = _geometry(2, n, 2, False)
    coords, sub_maps, down_maps, up_maps = [coords0], [], [None], [None]
    for lvl in range(levels):
        if lvl > 0:
            c = output_coords(coords[-1], down)
            dmap = build_kernel_map(coords[-1], c, down)
            coords.append(c)
            down_maps.append(dmap)
            up_maps.append(dmap.transposed(coords[-2]))
        sub_maps.append(build_kernel_map(coords[lvl], coords[lvl], sub))
    return Hierarchy(coords, sub_maps, down_maps, up_maps)


def voxel_inputs(cloud: PointCloud, cmap: PointToCellMap, coords: np.ndarray, cfg: SegmentorConfig) -> np.ndarray:
    vox = cfg.voxel
    if cfg.features == "absolute":
        chans = np.column_stack([cloud.positions / POSITION_SCALE, cloud.intensity])
        return pool_mean(chans, cmap)
    # position inside the cell, in cell units centred on 0, plus intensity
    frame = vox.frame(cloud.positions)
    pooled = pool_mean(np.column_stack([frame, cloud.intensity]), cmap)
    centre = np.asarray(vox.lower) + (coords + 0.5) * np.asarray(vox.cell_size)
    pooled[:, :-1] = (pooled[:, :-1] - centre) / np.asarray(vox.cell_size)
    return pooled


class _Conv:
    """Conv + bias with its cached input for the reverse pass."""

    def __init__(self, name: str, kmap: KernelMap, dataflow: str):
        self.name, self.kmap, self.dataflow = name, kmap, dataflow

    def forward(self, params, x):
        self.x = x
        out, _ = KERNELS[self.dataflow](x, params[self.name + ".w"], self.kmap)
        return out + params[self.name + ".b"]

    def backward(self, params, grads, g):
        gx, gw = conv_backward_arrays(g, self.x, params[self.name + ".w"], self.kmap)
        grads[self.name + ".w"] += gw
        grads[self.name + ".b"] += g.sum(axis=0)
        return gx


@dataclass
class ForwardCache:
    cmap: PointToCellMap
    hierarchy: Hierarchy
    tape: list = field(default_factory=list)
    head_in: np.ndarray | None = None


def _relu(z):
    return np.maximum(z, 0), z > 0


def forward(params: dict, cloud: PointCloud, cfg: SegmentorConfig, keep: bool = False):
    """Per-point logits (N x C); with ``keep=True`` also the reverse-pass cache."""
    dtype = params["head.w"].dtype
    coords0, cmap = voxelize(cloud, cfg.voxel)
    n_cls = cfg.num_classes
    if coords0.shape[0] == 0:
        logits = np.zeros((len(cloud), n_cls), dtype=dtype)
        return (logits, ForwardCache(cmap, None)) if keep else logits

    hier = build_hierarchy(coords0, cfg.levels)
    cache = ForwardCache(cmap, hier)
    tape = cache.tape
    feats = voxel_inputs(cloud, cmap, coords0, cfg).astype(dtype)

    z = feats @ params["stem.w"] + params["stem.b"]
    h, mask = _relu(z)
    tape.append(("stem", feats, mask))
    skips = []
    for lvl in range(cfg.levels):
        if lvl > 0:
            conv = _Conv(f"down{lvl}", hier.down_maps[lvl], cfg.dataflow)
            h, mask = _relu(conv.forward(params, h))
            tape.append(("conv", conv, mask))
        for b in range(cfg.depth):
            c1 = _Conv(f"enc{lvl}.block{b}.conv1", hier.sub_maps[lvl], cfg.dataflow)
            c2 = _Conv(f"enc{lvl}.block{b}.conv2", hier.sub_maps[lvl], cfg.dataflow)
            r1, m1 = _relu(c1.forward(params, h))
            h, m2 = _relu(h + c2.forward(params, r1))
            tape.append(("block", c1, m1, c2, m2))
        skips.append(h)
        tape.append(("skip", lvl))
    for lvl in range(cfg.levels - 2, -1, -1):
        up = _Conv(f"up{lvl}", hier.up_maps[lvl + 1], cfg.dataflow)
        u, mu = _relu(up.forward(params, h))
        cat = np.concatenate([u, skips[lvl]], axis=1)
        fuse = _Conv(f"fuse{lvl}", hier.sub_maps[lvl], cfg.dataflow)
        h, mf = _relu(fuse.forward(params, cat))
        tape.append(("decode", lvl, up, mu, fuse, mf, u.shape[1]))
    cache.head_in = h
    voxel_logits = h @ params["head.w"] + params["head.b"]
    logits = devoxelize(voxel_logits, cmap, fill=0)
    return (logits, cache) if keep else logits


def backward(params: dict, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(per-point logits)."""
    grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
    if cache.hierarchy is None:
        return grads
    cmap = cache.cmap
    dvox = np.zeros((cmap.num_voxels, dlogits.shape[1]), dtype=np.float64)
    kept = cmap.point_to_voxel >= 0
    np.add.at(dvox, cmap.point_to_voxel[kept], dlogits[kept])
    grads["head.w"] += cache.head_in.T.astype(np.float64) @ dvox
    grads["head.b"] += dvox.sum(axis=0)
    dh = dvox @ params["head.w"].T.astype(np.float64)
    dskips: dict[int, np.ndarray] = {}
    for entry in reversed(cache.tape):
        kind = entry[0]
        if kind == "decode":
            _, lvl, up, mu, fuse, mf, width = entry
            dcat = fuse.backward(params, grads, dh * mf)
            dskips[lvl] = dcat[:, width:]
            dh = up.backward(params, grads, dcat[:, :width] * mu)
        elif kind == "skip":
            lvl = entry[1]
            if lvl in dskips:
                dh = dh + dskips.pop(lvl)
        elif kind == "block":
            _, c1, m1, c2, m2 = entry
            ds = dh * m2
            dr1 = c2.backward(params, grads, ds)
            dh = ds + c1.backward(params, grads, dr1 * m1)
        elif kind == "conv":
            _, conv, mask = entry
            dh = conv.backward(params, grads, dh * mask)
        elif kind == "stem":
            _, feats, mask = entry
            dz = dh * mask
            grads["stem.w"] += feats.T.astype(np.float64) @ dz
            grads["stem.b"] += dz.sum(axis=0)
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore: int = IGNORE):
    """Mean softmax cross-entropy over non-ignored points and its logit gradient.

    Returns ``(loss, dlogits, scored)``; with no scored points the loss is 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    scored = labels != ignore
    count = int(scored.sum())
    grad = np.zeros_like(z)
    if count == 0:
        return 0.0, grad, 0
    zs = z[scored]
    zs = zs - zs.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(count)
    loss = float((logsum - zs[rows, labels[scored]]).sum() / count)
    probs = np.exp(zs - logsum[:, None])
    probs[rows, labels[scored]] -= 1.0
    grad[scored] = probs / count
    return loss, grad, count


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy(logits, labels)[0]


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)  # first maximum -> lowest class on ties


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, cfg: SegmentorConfig, params: dict | None = None) -> TrainState:
        params = init_params(cfg) if params is None else params
        zeros = lambda: {k: np.zeros(p.shape) for k, p in params.items()}  # noqa: E731
        return cls(params, zeros(), zeros(), 0)


def batch_loss_and_grads(params: dict, batch: Sequence[PointCloud], cfg: SegmentorConfig):
    """Cross-entropy averaged over all scored points of the batch, with gradients."""
    results = []
    total = 0
    for cloud in batch:
        if not cloud.has_labels:
            raise InvalidInputError("training clouds must be labeled")
        logits, cache = forward(params, cloud, cfg, keep=True)
        value, dlogits, count = cross_entropy(logits, cloud.labels)
        results.append((value, dlogits, count, cache))
        total += count
    grads = {k: np.zeros(v.shape) for k, v in params.items()}
    value = 0.0
    if total == 0:
        return value, grads
    for part, dlogits, count, cache in results:
        if count == 0:
            continue
        weight = count / total
        value += weight * part
        for k, g in backward(params, cache, dlogits * weight).items():
            grads[k] += g
    return value, grads


def adamw_update(state: TrainState, grads: dict, cfg: SegmentorConfig) -> TrainState:
    """Adaptive-moment step with weight decay decoupled from the gradient."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    params, m, v = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        p64 = p.astype(np.float64)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p64
        params[k] = (p64 - cfg.lr * update).astype(p.dtype)
    return TrainState(params, m, v, t)


def train_step(batch: Sequence[PointCloud], state: TrainState, cfg: SegmentorConfig):
    """One forward/backward/AdamW step; returns ``(new_state, loss)``."""
    value, grads = batch_loss_and_grads(state.params, batch, cfg)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(state.step, value)
    return adamw_update(state, grads, cfg), value


@dataclass
class TrainReport:
    losses: list[float]
    step_seconds: list[float]
    miou: float | None = None
    macc: float | None = None

    @property
    def iters_per_second(self) -> float | None:
        if not self.step_seconds:
            return None
        return len(self.step_seconds) / sum(self.step_seconds)


def train(state: TrainState, cfg: SegmentorConfig, batches, steps: int):
    """Run ``steps`` updates drawing batches from the ``batches`` callable."""
    losses, seconds = [], []
    for step in range(steps):
        batch = batches(step)
        t0 = time.perf_counter()
        state, value = train_step(batch, state, cfg)
        seconds.append(max(time.perf_counter() - t0, 1e-9))
        losses.append(value)
    return state, TrainReport(losses, seconds)


class Segmentor:
    """Bound config + parameters; callable as a per-point logit model."""

    def __init__(self, cfg: SegmentorConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params

    def __call__(self, cloud: PointCloud) -> np.ndarray:
        return forward(self.params, cloud, self.cfg)

    def predict(self, cloud: PointCloud) -> np.ndarray:
        return predict_from_logits(self(cloud))


def predict(cloud: PointCloud, cfg: SegmentorConfig, params: dict) -> np.ndarray:
    return predict_from_logits(forward(params, cloud, cfg))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   8 bytes   magic b"SPSGCKPT"
#   u32       format version (1)
#   u32       byte length L of the config echo
#   L bytes   UTF-8 JSON of SegmentorConfig.to_dict(), keys sorted
#   u64       parameter count P (scalars)
#   P * f32   parameters, flattened C-order, in param_shapes() order

MAGIC = b"SPSGCKPT"
VERSION = 1


def checkpoint_bytes(cfg: SegmentorConfig, params: dict) -> bytes:
    shapes = param_shapes(cfg)
    if list(shapes) != list(params):
        raise IncompatibleCheckpointError("parameter names do not match the config")
    echo = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(params[k], dtype="<f4").tobytes() for k in shapes)
    count = sum(int(np.prod(s)) for s in shapes.values())
    return MAGIC + struct.pack("<II", VERSION, len(echo)) + echo + struct.pack("<Q", count) + blob


def parse_checkpoint(data: bytes) -> tuple[SegmentorConfig, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise IncompatibleCheckpointError("not a sparseseg checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise IncompatibleCheckpointError(f"unsupported checkpoint version {version}")
    cfg = SegmentorConfig.from_dict(json.loads(data[16 : 16 + n].decode()))
    (count,) = struct.unpack_from("<Q", data, 16 + n)
    shapes = param_shapes(cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    flat = np.frombuffer(data, dtype="<f4", offset=24 + n)
    if count != expected or flat.size != expected:
        raise IncompatibleCheckpointError(
            f"checkpoint holds {flat.size} parameters, config implies {expected}"
        )
    params, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[pos : pos + size].astype(np.float32).reshape(shape)
        pos += size
    return cfg, params


def save_checkpoint(path, cfg: SegmentorConfig, params: dict):
    Path(path).write_bytes(checkpoint_bytes(cfg, params))


def load_checkpoint(path, expect: SegmentorConfig | None = None):
    cfg, params = parse_checkpoint(Path(path).read_bytes())
    if expect is not None and expect.architecture() != cfg.architecture():
        raise IncompatibleCheckpointError(
            "checkpoint architecture differs from the run configuration"
        )
    if expect is not None:
        cfg = replace(expect)
    return cfg, params
