"""Text detection/recognition interfaces, retention filter, and region cache.

Detection and recognition sit behind small interfaces so pretrained models
can be swapped in; the built-in implementations are a connected-component
ink detector and a tiny differentiable convolutional recognizer, both fast
enough for CPU test runs.

The region cache stores, per image, every detected box with the recognizer's
logits for the ground-truth crop, so training never re-detects and only
recognizes reconstructed crops.

Cache layout (one subdirectory per image id)::

    <cache root>/<image_id>/regions.idx      structured-text index
    <cache root>/<image_id>/region_0000.f32  raw little-endian float32 blob,
                                             T*S values in row-major order
"""

from __future__ import annotations

import math
import re
import shutil
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import (
    BBox,
    RegionCacheEntry,
    RegionRecord,
    TrainConfig,
    validate_bbox,
    validate_image,
)

FILTER_REDUCTIONS = ("full", "position_max")


def english_filter(
    v: np.ndarray,
    m_min: float,
    sigma_max: float,
    reduction: str = "full",
) -> bool:
    """Retention rule for recognized regions: high, tight logit statistics.

    Returns true iff median(v) >= m_min and stdev(v) <= sigma_max, both
    inclusive. Statistics are computed in float64 over all T*S entries
    (``reduction="full"``, the default) or over the per-position maxima
    (``reduction="position_max"``, length-T vector). stdev is the population
    form (divide by the entry count).
    """
    if reduction not in FILTER_REDUCTIONS:
        raise ValueError(f"reduction must be one of {FILTER_REDUCTIONS}, got {reduction!r}")
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"logit matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("logit matrix contains non-finite values")
    if reduction == "position_max":
        arr = arr.max(axis=1)
    return bool(np.median(arr) >= m_min and np.std(arr) <= sigma_max)


class TextDetector(ABC):
    """Finds text regions in an image; order of returned boxes is canonical."""

    @abstractmethod
    def detect(self, image: np.ndarray) -> list[BBox]:
        """Return boxes in a deterministic order for a fixed image."""


class TextRecognizer(ABC):
    """Maps a cropped text region to a T x S logit matrix.

    ``recognize`` accepts an h x w x 3 crop either as a numpy array (returns
    float32 numpy logits; the cache-building path) or, when
    ``supports_gradients`` is true, as a torch tensor (returns a tensor of
    the same dtype, connected to the autograd graph; the training path).
    Internal resizing to whatever the recognizer needs is its own business:
    the output shape is always exactly max_len x len(charset).
    """

    charset: tuple[str, ...]
    max_len: int
    supports_gradients: bool = False

    @abstractmethod
    def recognize(
        self, crop: Union[np.ndarray, torch.Tensor]
    ) -> Union[np.ndarray, torch.Tensor]:
        """Logits for the crop; see class docstring for the dtype contract."""


@dataclass
class FixedBoxDetector(TextDetector):
    """Returns a preset box list; used when ground-truth boxes are known."""

    boxes: Sequence[BBox]

    def detect(self, image: np.ndarray) -> list[BBox]:
        arr = validate_image(image)
        shape = (arr.shape[0], arr.shape[1])
        for box in self.boxes:
            if not validate_bbox(box, shape):
                raise ValueError(f"preset box {box} invalid for image shape {shape}")
        return list(self.boxes)


@dataclass
class InkTextDetector(TextDetector):
    """Connected-component detector for dark text on a light background.

    Pixels below ``ink_threshold`` luminance are ink; ink is dilated
    horizontally by ``merge_gap`` so the glyphs of one word join into a
    single component, then each component's ink extent (plus ``margin``)
    becomes a box. Boxes are returned in reading order (top-to-bottom,
    left-to-right), which downstream code treats as canonical.
    """

    ink_threshold: float = 0.5
    merge_gap: int = 3
    min_pixels: int = 4
    margin: int = 1

    def detect(self, image: np.ndarray) -> list[BBox]:
        arr = validate_image(image)
        height, width = arr.shape[0], arr.shape[1]
        ink = arr.mean(axis=2) < self.ink_threshold
        if not ink.any():
            return []
        structure = np.ones((1, 2 * self.merge_gap + 1), dtype=bool)
        labels, _ = ndimage.label(ndimage.binary_dilation(ink, structure=structure))
        boxes = []
        for index, slices in enumerate(ndimage.find_objects(labels), start=1):
            # restrict to this component's own ink; slice bboxes can overlap
            component = ink[slices] & (labels[slices] == index)
            if component.sum() < self.min_pixels:
                continue
            rows = np.where(component.any(axis=1))[0]
            cols = np.where(component.any(axis=0))[0]
            y0 = max(0, slices[0].start + int(rows[0]) - self.margin)
            y1 = min(height, slices[0].start + int(rows[-1]) + 1 + self.margin)
            x0 = max(0, slices[1].start + int(cols[0]) - self.margin)
            x1 = min(width, slices[1].start + int(cols[-1]) + 1 + self.margin)
            boxes.append(BBox(x0, y0, x1, y1))
        boxes.sort(key=lambda b: (b.y0, b.x0))
        return boxes


STUB_CHARSET = (
    ("<eos>",)
    + tuple("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
    + tuple("abcdefghijklmnopqrstuvwxyz")
    + tuple("0123456789")
    + (" ",)
)


class StubRecognizer(TextRecognizer):
    """Small fixed-weight convolutional recognizer for desk-scale runs.

    Crops are bilinearly resized to 16 x 48, passed through two strided
    tanh convolutions and a linear head, and mapped to ``15 + tanh(z)``
    so the logit statistics land inside the default retention thresholds.
    Every stage is smooth, which finite-difference gradient checks rely on.

    Weights are drawn once from ``seed`` and never trained; the recognizer
    is a fixed function, exactly like a frozen pretrained model. ``dtype``
    selects the computation precision (float64 instances are used by
    gradient tests; the package default is float32).
    """

    supports_gradients = True

    RESIZE_HW = (16, 48)
    HIDDEN = 16 * 4 * 12  # feature count after the two stride-2 convs

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32,
                 max_len: int = 8):
        self.charset = STUB_CHARSET
        self.max_len = max_len
        self.dtype = dtype
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        def draw(*shape, scale):
            return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).to(dtype)
        out = max_len * len(self.charset)
        self.w1 = draw(8, 3, 3, 3, scale=0.5)
        self.b1 = draw(8, scale=0.1)
        self.w2 = draw(16, 8, 3, 3, scale=0.5)
        self.b2 = draw(16, scale=0.1)
        self.w3 = draw(self.HIDDEN, out, scale=1.0 / math.sqrt(self.HIDDEN))
        self.b3 = draw(out, scale=0.1)

    def _forward(self, crop: torch.Tensor) -> torch.Tensor:
        # contiguous() pins the memory layout so a strided view (a crop of a
        # full reconstruction) and a copied array produce bit-identical
        # logits, which T(x, x) = 0 exactness depends on
        x = crop.permute(2, 0, 1).unsqueeze(0).contiguous()
        x = F.interpolate(x, size=self.RESIZE_HW, mode="bilinear", align_corners=False)
        h = torch.tanh(F.conv2d(x, self.w1, self.b1, stride=2, padding=1))
        h = torch.tanh(F.conv2d(h, self.w2, self.b2, stride=2, padding=1))
        z = torch.tanh(h.reshape(1, -1) @ self.w3 + self.b3)
        return 15.0 + z.reshape(self.max_len, len(self.charset))

    def recognize(
        self, crop: Union[np.ndarray, torch.Tensor]
    ) -> Union[np.ndarray, torch.Tensor]:
        if isinstance(crop, torch.Tensor):
            if crop.ndim != 3 or crop.shape[2] != 3:
                raise ValueError(f"crop must be h x w x 3, got shape {tuple(crop.shape)}")
            if crop.dtype != self.dtype:
                raise TypeError(
                    f"crop dtype {crop.dtype} does not match recognizer dtype {self.dtype}"
                )
            return self._forward(crop)
        arr = np.asarray(crop)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"crop must be h x w x 3, got shape {arr.shape}")
        with torch.no_grad():
            out = self._forward(torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype))
        return out.to(torch.float32).numpy()


def build_cache(
    image: np.ndarray,
    image_id: str,
    detector: TextDetector,
    recognizer: TextRecognizer,
    cfg: TrainConfig,
) -> RegionCacheEntry:
    """Detect, recognize, and filter every region of a ground-truth image.

    Records keep the detector's output order. Zero detections produce a
    valid entry with no records.
    """
    arr = validate_image(image)
    shape = (arr.shape[0], arr.shape[1])
    try:
        boxes = detector.detect(arr)
    except Exception as exc:
        raise RuntimeError(f"text detection failed for image {image_id!r}: {exc}") from exc
    records = []
    for box in boxes:
        if not validate_bbox(box, shape):
            raise ValueError(f"image {image_id!r}: detected box {box} invalid for shape {shape}")
        crop = arr[box.y0 : box.y1, box.x0 : box.x1, :]
        logits = recognizer.recognize(crop)
        retained = english_filter(logits, cfg.m_min, cfg.sigma_max)
        records.append(RegionRecord(bbox=box, logits=logits, retained=retained))
    return RegionCacheEntry(image_id=image_id, source_shape=shape, records=records)


class CacheNotFoundError(FileNotFoundError):
    """No cache entry exists for the requested image id."""


class CacheFormatError(ValueError):
    """A cache entry exists but its index or a blob is malformed."""


INDEX_NAME = "regions.idx"
INDEX_MAGIC = "textcomp-cache-index v1"

_RECORD_RE = re.compile(
    r"^record (\d+): bbox=(-?\d+),(-?\d+),(-?\d+),(-?\d+) "
    r"retained=(true|false) T=(\d+) S=(\d+) blob=(\S+)$"
)


def _check_image_id(image_id: str) -> str:
    if not image_id or image_id in (".", "..") or "/" in image_id or "\\" in image_id:
        raise ValueError(f"image_id {image_id!r} is not a valid cache directory name")
    return image_id


def cache_dir_for(root: Path, image_id: str) -> Path:
    return Path(root) / _check_image_id(image_id)


def has_cache(root: Path, image_id: str) -> bool:
    return (cache_dir_for(root, image_id) / INDEX_NAME).is_file()


def save_cache(entry: RegionCacheEntry, root: Path) -> Path:
    """Persist one entry under ``root``; returns its subdirectory.

    An existing entry for the same image id is replaced wholesale, so the
    directory never mixes records from different builds.
    """
    subdir = cache_dir_for(root, entry.image_id)
    if subdir.exists():
        shutil.rmtree(subdir)
    subdir.mkdir(parents=True)
    lines = [
        INDEX_MAGIC,
        f"image_id = {entry.image_id}",
        f"height = {entry.source_shape[0]}",
        f"width = {entry.source_shape[1]}",
        f"records = {len(entry.records)}",
    ]
    for k, record in enumerate(entry.records):
        blob_name = f"region_{k:04d}.f32"
        t, s = record.logits.shape
        (subdir / blob_name).write_bytes(
            np.ascontiguousarray(record.logits, dtype="<f4").tobytes()
        )
        b = record.bbox
        lines.append(
            f"record {k}: bbox={b.x0},{b.y0},{b.x1},{b.y1} "
            f"retained={'true' if record.retained else 'false'} "
            f"T={t} S={s} blob={blob_name}"
        )
    (subdir / INDEX_NAME).write_text("\n".join(lines) + "\n")
    return subdir


def load_cache(root: Path, image_id: str) -> RegionCacheEntry:
    """Load one entry; raises CacheNotFoundError / CacheFormatError."""
    subdir = cache_dir_for(root, image_id)
    index_path = subdir / INDEX_NAME
    if not index_path.is_file():
        raise CacheNotFoundError(f"no cache entry for image {image_id!r} under {root}")
    lines = index_path.read_text().splitlines()
    if not lines or lines[0] != INDEX_MAGIC:
        raise CacheFormatError(f"{index_path}: unrecognized index header")

    header = {}
    record_lines = []
    for line in lines[1:]:
        if line.startswith("record "):
            record_lines.append(line)
        elif " = " in line:
            key, _, value = line.partition(" = ")
            header[key] = value
        elif line.strip():
            raise CacheFormatError(f"{index_path}: unparseable line {line!r}")
    try:
        declared = int(header["records"])
        shape = (int(header["height"]), int(header["width"]))
        file_id = header["image_id"]
    except (KeyError, ValueError) as exc:
        raise CacheFormatError(f"{index_path}: missing or bad header field: {exc}") from exc
    if file_id != image_id:
        raise CacheFormatError(f"{index_path}: index is for image {file_id!r}")
    if declared != len(record_lines):
        raise CacheFormatError(
            f"{index_path}: header declares {declared} records, found {len(record_lines)}"
        )

    records = []
    for k, line in enumerate(record_lines):
        m = _RECORD_RE.match(line)
        if not m:
            raise CacheFormatError(f"{index_path}: malformed record line {line!r}")
        if int(m.group(1)) != k:
            raise CacheFormatError(f"{index_path}: record lines out of order at {k}")
        x0, y0, x1, y1 = (int(m.group(i)) for i in range(2, 6))
        retained = m.group(6) == "true"
        t, s = int(m.group(7)), int(m.group(8))
        blob_path = subdir / m.group(9)
        if not blob_path.is_file():
            raise CacheFormatError(f"{blob_path}: missing logit blob")
        raw = blob_path.read_bytes()
        if len(raw) != t * s * 4:
            raise CacheFormatError(
                f"{blob_path}: expected {t * s * 4} bytes for {t}x{s} logits, got {len(raw)}"
            )
        logits = np.frombuffer(raw, dtype="<f4").reshape(t, s).copy()
        try:
            records.append(RegionRecord(bbox=BBox(x0, y0, x1, y1), logits=logits,
                                        retained=retained))
        except ValueError as exc:
            raise CacheFormatError(f"{index_path}: record {k}: {exc}") from exc
    try:
        return RegionCacheEntry(image_id=image_id, source_shape=shape, records=records)
    except ValueError as exc:
        raise CacheFormatError(f"{index_path}: {exc}") from exc
