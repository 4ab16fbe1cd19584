"""Test-time augmentation: transform variants and probability averaging."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from sparseseg.errors import InvalidInputError, VariantError
from sparseseg.pointcloud import PointCloud, SimilarityTransform, apply_transform

Model = Callable[[PointCloud], np.ndarray]

FLIPS = ((False, False), (True, False), (False, True), (True, True))


@dataclass(frozen=True)
class TTAConfig:
    flip: bool = False
    rotate: bool = False
    scale: bool = False
    translate: bool = False
    rotations: tuple[float, ...] = (-np.pi / 4, 0.0, np.pi / 4)
    scales: tuple[float, ...] = (0.95, 1.0, 1.05)
    translations: tuple[tuple[float, float, float], ...] = (
        (-0.1, -0.1, 0.0),
        (0.0, 0.0, 0.0),
        (0.1, 0.1, 0.0),
    )

    def __post_init__(self):
        rotations = tuple(float(r) for r in self.rotations)
        scales = tuple(float(s) for s in self.scales)
        translations = tuple(tuple(float(v) for v in t) for t in self.translations)
        if len(rotations) != 3 or 0.0 not in rotations:
            raise InvalidInputError("rotation set needs 3 angles including 0")
        if len(scales) != 3 or 1.0 not in scales:
            raise InvalidInputError("scale set needs 3 factors including 1")
        if len(translations) != 3 or (0.0, 0.0, 0.0) not in translations:
            raise InvalidInputError("translation set needs 3 vectors including zero")
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "translations", translations)

    @classmethod
    def progressive(cls, level: int) -> TTAConfig:
        """Enable flip, rotate, scale, translate cumulatively (level 0..4)."""
        flags = [k < level for k in range(4)]
        return cls(*flags)

    @property
    def variant_count(self) -> int:
        return (4 if self.flip else 1) * (3 if self.rotate else 1) * (3 if self.scale else 1) * (
            3 if self.translate else 1
        )


def enumerate_variants(cfg: TTAConfig) -> list[SimilarityTransform]:
    """Cartesian product of enabled sets, flips outermost; identity comes first."""
    flips = FLIPS if cfg.flip else FLIPS[:1]
    # identity element first in each set keeps variant 0 the plain input
    rotations = sorted(cfg.rotations, key=lambda r: r != 0.0) if cfg.rotate else [0.0]
    scales = sorted(cfg.scales, key=lambda s: s != 1.0) if cfg.scale else [1.0]
    zero = (0.0, 0.0, 0.0)
    translations = sorted(cfg.translations, key=lambda t: t != zero) if cfg.translate else [zero]
    return [
        SimilarityTransform(yaw, scale, fx, fy, t)
        for (fx, fy), yaw, scale, t in itertools.product(flips, rotations, scales, translations)
    ]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def tta_probabilities(cloud: PointCloud, model: Model, variants: list[SimilarityTransform]) -> np.ndarray:
    """Mean per-point softmax over variants, reduced in variant order.

    Transforms keep point order, so no inverse mapping is needed.
    """
    total = None
    for i, t in enumerate(variants):
        try:
            probs = softmax(model(apply_transform(cloud, t)))
        except Exception as exc:
            raise VariantError(i, t, exc) from exc
        total = probs if total is None else total + probs
    return total / len(variants)


def tta_predict(cloud: PointCloud, model: Model, cfg: TTAConfig | list[SimilarityTransform]) -> np.ndarray:
    variants = cfg if isinstance(cfg, list) else enumerate_variants(cfg)
    if not variants:
        raise InvalidInputError("no TTA variants")
    # argmax keeps the first maximum, i.e. ties go to the lowest class
    return np.argmax(tta_probabilities(cloud, model, variants), axis=1)
