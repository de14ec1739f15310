"""Shared domain types: images, boxes, logit matrices, curves, configs.

Conventions used across the package:

* Images are H x W x 3 numpy arrays with values in [0, 1]. 8-bit conversion
  happens only at file I/O.
* Bounding boxes use top-left inclusive / bottom-right exclusive integer
  pixel coordinates, so width = x1 - x0 and height = y1 - y0.
* Logit matrices are T x S float32 arrays (T = maximum character length,
  S = character-set size). float32 matches the on-disk cache blob format,
  so a cached matrix round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from typing import Optional, Sequence

import numpy as np


def validate_image(pixels: np.ndarray) -> np.ndarray:
    """Check the H x W x 3, finite, [0, 1] image contract and return the array.

    Raises ValueError when the contract is violated.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must have positive height and width, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"image values outside [0, 1]: min={arr.min()}, max={arr.max()}"
        )
    return arr


def clamp_image(values: np.ndarray) -> np.ndarray:
    """Clip an H x W x 3 array into [0, 1] for evaluation or export.

    Reconstructions may overshoot the pixel range; this clamps them before
    metrics or file output. It must never be used inside the differentiable
    loss path. Non-finite entries indicate a diverged model and raise.
    """
    arr = np.asarray(values)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite pixel values: model output has diverged")
    return np.clip(arr, 0.0, 1.0)


def validate_logits(values: np.ndarray) -> np.ndarray:
    """Check the T x S finite logit-matrix contract; returns a float32 array."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"logit matrix must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 2:
        raise ValueError(f"logit matrix needs T >= 1 and S >= 2, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("logit matrix contains non-finite values")
    return arr


@dataclass(frozen=True)
class BBox:
    """Axis-aligned text region: top-left inclusive, bottom-right exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)):
                raise TypeError(f"BBox.{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(
                f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1}): "
                "need 0 <= x0 < x1 and 0 <= y0 < y1"
            )

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(d["x0"], d["y0"], d["x1"], d["y1"])


def validate_bbox(bbox: BBox, shape: tuple[int, int]) -> bool:
    """True iff ``bbox`` is a nonempty box inside an image of (H, W) ``shape``."""
    height, width = shape
    return (
        0 <= bbox.x0 < bbox.x1 <= width
        and 0 <= bbox.y0 < bbox.y1 <= height
    )


@dataclass
class RegionRecord:
    """One detected text region: its box, ground-truth logits, filter verdict.

    ``logits`` were produced from exactly the crop of the ground-truth image
    at ``bbox`` and are stored as float32 (the cache blob precision).
    """

    bbox: BBox
    logits: np.ndarray
    retained: bool

    def __post_init__(self):
        self.logits = validate_logits(self.logits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionRecord):
            return NotImplemented
        return (
            self.bbox == other.bbox
            and self.retained == other.retained
            and self.logits.shape == other.logits.shape
            and np.array_equal(self.logits, other.logits)
        )


@dataclass
class RegionCacheEntry:
    """Per-image precomputed regions: boxes plus ground-truth logits.

    ``records`` preserve detector output order, which is the canonical
    region order everywhere downstream.
    """

    image_id: str
    source_shape: tuple[int, int]
    records: list[RegionRecord]

    def __post_init__(self):
        height, width = self.source_shape
        self.source_shape = (int(height), int(width))
        for record in self.records:
            if not validate_bbox(record.bbox, self.source_shape):
                raise ValueError(
                    f"record bbox {record.bbox} invalid for shape {self.source_shape}"
                )

    @property
    def n_retained(self) -> int:
        return sum(1 for r in self.records if r.retained)

    def retained_records(self) -> list[RegionRecord]:
        return [r for r in self.records if r.retained]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionCacheEntry):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.source_shape == other.source_shape
            and self.records == other.records
        )


@dataclass(frozen=True)
class RDPoint:
    """One operating point on a rate-quality curve."""

    bpp: float
    value: float

    def __post_init__(self):
        if not (self.bpp > 0 and np.isfinite(self.bpp)):
            raise ValueError(f"bpp must be positive and finite, got {self.bpp}")
        if not np.isfinite(self.value):
            raise ValueError(f"curve value must be finite, got {self.value}")


METRIC_KINDS = ("cer", "wer", "psnr")


@dataclass(frozen=True)
class RDCurve:
    """Rate-quality curve for one (algorithm, weighting) configuration.

    Points are sorted by bpp at construction and duplicate bpp values are
    rejected, so two curves built from the same points in any order compare
    equal. Bjontegaard computations require at least 3 points.
    """

    label: str
    metric_kind: str
    points: tuple[RDPoint, ...]

    def __init__(self, label: str, metric_kind: str, points: Sequence[RDPoint]):
        if metric_kind not in METRIC_KINDS:
            raise ValueError(f"metric_kind must be one of {METRIC_KINDS}, got {metric_kind!r}")
        pts = tuple(sorted(points, key=lambda p: p.bpp))
        if not pts:
            raise ValueError("curve needs at least one point")
        bpps = [p.bpp for p in pts]
        if len(set(bpps)) != len(bpps):
            raise ValueError(f"duplicate bpp values in curve {label!r}")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "metric_kind", metric_kind)
        object.__setattr__(self, "points", pts)

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class EvalRecord:
    """Per-image evaluation row.

    ``cer``/``wer`` are None for images with no retained text regions; such
    rows are excluded from text-metric averages. CER may exceed 1 (insertions
    are unbounded); WER cannot, because evaluation pairs regions one-to-one.
    """

    image_id: str
    bpp: float
    cer: Optional[float]
    wer: Optional[float]
    psnr: float

    def __post_init__(self):
        if self.cer is not None and self.cer < 0:
            raise ValueError(f"cer must be >= 0, got {self.cer}")
        if self.wer is not None and not (0.0 <= self.wer <= 1.0):
            raise ValueError(f"wer must be in [0, 1], got {self.wer}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(**d)


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Defaults follow the experimental protocol this package implements:
    batch size 8, learning rate 1e-4, 20 epochs with a one-time 20-epoch
    extension if the loss has not converged, text-loss weight 0.1, and the
    English-region filter thresholds (14.2, 2.0). ``kappa = 0`` reproduces
    the plain rate-distortion objective exactly.

    ``max_steps`` and ``checkpoint_every`` are harness knobs for smoke-scale
    runs; they do not change the objective.
    """

    lmbda: float
    kappa: float = 0.1
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    m_min: float = 14.2
    sigma_max: float = 2.0
    seed: int = 0
    max_steps: Optional[int] = None
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ValueError(f"lmbda must be > 0, got {self.lmbda}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)
