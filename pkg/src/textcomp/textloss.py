"""Text logit loss and total training objective.

The text loss compares, region by region, the recognizer's logits for
reconstructed crops against cached ground-truth logits:

    T(x, x_hat) = (1/n) * sum_i ||v_i - v_hat_i||^2

with the squared Frobenius norm summed over all T*S entries and n counting
retained regions only. Cached v_i are constants: gradients flow to x_hat
through recognize(crop(x_hat)) alone.

The total objective per batch averages the per-image sum

    rate_y + rate_z + lambda * distortion + kappa * T

over the batch. kappa = 0 short-circuits the text term entirely, so a
baseline run never touches the recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .compress import CompressionModel, distortion
from .core import RegionCacheEntry, validate_bbox, BBox
from .textpipe import TextRecognizer

Scalar = Union[float, torch.Tensor]


@dataclass
class TextLossBreakdown:
    """Per-region squared logit distances and their region-mean.

    ``mean`` is sum(per_region) / n for n >= 1 and exactly 0 for n = 0.
    Values are tensors when the reconstruction was a tensor (training) and
    floats when it was an array.
    """

    per_region: tuple[Scalar, ...]
    mean: Scalar
    n: int


@dataclass
class TotalLossBreakdown:
    """Batch-mean loss components; total = rate_y + rate_z + lambda*distortion + kappa*text."""

    rate_y: Scalar
    rate_z: Scalar
    distortion: Scalar
    text: Scalar
    lmbda: float
    kappa: float
    total: Scalar

    def as_floats(self) -> "TotalLossBreakdown":
        def f(v: Scalar) -> float:
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return TotalLossBreakdown(
            rate_y=f(self.rate_y),
            rate_z=f(self.rate_z),
            distortion=f(self.distortion),
            text=f(self.text),
            lmbda=self.lmbda,
            kappa=self.kappa,
            total=f(self.total),
        )


def crop(image: Union[np.ndarray, torch.Tensor], bbox: BBox):
    """The h x w x 3 subarray at bbox; differentiable for tensor input.

    Slicing keeps the autograd graph: the gradient with respect to the
    image is the crop gradient scattered into the box, zero elsewhere.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got shape {tuple(image.shape)}")
    if not validate_bbox(bbox, (int(image.shape[0]), int(image.shape[1]))):
        raise ValueError(
            f"bbox {bbox} invalid for image shape {tuple(image.shape[:2])}"
        )
    return image[bbox.y0 : bbox.y1, bbox.x0 : bbox.x1, :]


def text_logit_loss(
    x: Union[np.ndarray, torch.Tensor],
    x_hat: Union[np.ndarray, torch.Tensor],
    cache: RegionCacheEntry,
    recognizer: TextRecognizer,
) -> TextLossBreakdown:
    """Squared logit distance between cached originals and x_hat's crops.

    Only retained regions contribute. ``x`` is used for shape consistency
    checks; its logits come from the cache, so the original-side path
    carries no gradient.
    """
    shape = (int(x.shape[0]), int(x.shape[1]))
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"x must be H x W x 3, got shape {tuple(x.shape)}")
    if tuple(x.shape) != tuple(x_hat.shape):
        raise ValueError(
            f"x and x_hat shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}"
        )
    if shape != cache.source_shape:
        raise ValueError(
            f"cache for image {cache.image_id!r} was built on shape "
            f"{cache.source_shape}, got image shape {shape}"
        )
    tensor_path = torch.is_tensor(x_hat)
    if tensor_path and x_hat.requires_grad and not recognizer.supports_gradients:
        raise RuntimeError(
            "recognizer does not support gradients; cannot train through it"
        )

    per_region: list[Scalar] = []
    for record in cache.retained_records():
        v_hat = recognizer.recognize(crop(x_hat, record.bbox))
        if tensor_path:
            v_ref = torch.from_numpy(record.logits).to(v_hat.dtype)
            per_region.append(((v_hat - v_ref) ** 2).sum())
        else:
            diff = np.asarray(v_hat, dtype=np.float64) - record.logits.astype(np.float64)
            per_region.append(float((diff * diff).sum()))

    n = len(per_region)
    if n == 0:
        zero: Scalar = torch.zeros((), dtype=x_hat.dtype) if tensor_path else 0.0
        return TextLossBreakdown(per_region=(), mean=zero, n=0)
    if tensor_path:
        mean = torch.stack(per_region).sum() / n
    else:
        mean = sum(per_region) / n
    return TextLossBreakdown(per_region=tuple(per_region), mean=mean, n=n)


def _to_model_input(x: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
    return t.permute(2, 0, 1).unsqueeze(0)


def total_loss(
    batch: Sequence[tuple[np.ndarray, Optional[RegionCacheEntry]]],
    model: CompressionModel,
    recognizer: Optional[TextRecognizer],
    lmbda: float,
    kappa: float,
    dtype: torch.dtype = torch.float32,
) -> TotalLossBreakdown:
    """Batch objective: per-image loop, then mean over the m images.

    Each image runs through the model individually (variable sizes batch
    cleanly this way) and contributes rate_y + rate_z + lambda*distortion +
    kappa*text. Components are batch-averaged separately and the total is
    their weighted sum, so the breakdown identity holds exactly.
    """
    m = len(batch)
    if m < 1:
        raise ValueError("batch must contain at least one image")
    if kappa != 0 and recognizer is None:
        raise ValueError("kappa != 0 requires a recognizer")

    rate_y_sum: Scalar = 0.0
    rate_z_sum: Scalar = 0.0
    dist_sum: Scalar = 0.0
    text_sum: Scalar = 0.0
    for index, (x, cache) in enumerate(batch):
        if cache is None:
            raise ValueError(f"batch image {index} has no region cache")
        x_in = _to_model_input(x, dtype)
        x_hat_b, rate_y, rate_z = model(x_in)
        x_hat = x_hat_b.squeeze(0).permute(1, 2, 0)
        rate_y_sum = rate_y_sum + rate_y
        rate_z_sum = rate_z_sum + rate_z
        dist_sum = dist_sum + distortion(x_in.squeeze(0).permute(1, 2, 0), x_hat)
        if kappa != 0:
            breakdown = text_logit_loss(x, x_hat, cache, recognizer)
            text_sum = text_sum + breakdown.mean

    rate_y_mean = rate_y_sum / m
    rate_z_mean = rate_z_sum / m
    dist_mean = dist_sum / m
    text_mean = text_sum / m if kappa != 0 else torch.zeros((), dtype=dtype)
    total = rate_y_mean + rate_z_mean + lmbda * dist_mean + kappa * text_mean
    return TotalLossBreakdown(
        rate_y=rate_y_mean,
        rate_z=rate_z_mean,
        distortion=dist_mean,
        text=text_mean,
        lmbda=lmbda,
        kappa=kappa,
        total=total,
    )
