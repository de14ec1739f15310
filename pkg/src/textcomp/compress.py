"""Compression-model interface and a small built-in reference codec.

Any model exposing ``forward(x) -> (x_hat, rate_y_bits, rate_z_bits)`` on
(B, 3, H, W) tensors plugs into the training loop; external codecs are
adapted to this signature. The built-in ``TinyHyperprior`` is deliberately
small (three-layer transforms, 32 channels) so CPU smoke training finishes
in minutes.

Rates are differentiable estimates from the entropy models: uniform-noise
quantization during training, rounding at evaluation, with bits computed as
-sum(log2(likelihood)). There is no arithmetic coder; reported BPP comes
from the same estimate.
"""

from __future__ import annotations

import math
from abc import abstractmethod
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def rate_loss(likelihoods: Union[np.ndarray, torch.Tensor]) -> Union[float, torch.Tensor]:
    """Bits to code symbols with the given likelihoods: -sum(log2 p).

    Likelihoods must lie in (0, 1], which keeps the result nonnegative.
    Tensor input returns a scalar tensor (differentiable); array input
    returns a float.
    """
    if torch.is_tensor(likelihoods):
        if likelihoods.numel() == 0:
            raise ValueError("empty likelihood tensor")
        if bool((likelihoods <= 0).any()) or bool((likelihoods > 1).any()):
            raise ValueError("likelihoods must lie in (0, 1]")
        return -torch.log2(likelihoods).sum()
    arr = np.asarray(likelihoods, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty likelihood array")
    if (arr <= 0).any() or (arr > 1).any():
        raise ValueError("likelihoods must lie in (0, 1]")
    return float(-np.log2(arr).sum())


def distortion(x: Union[np.ndarray, torch.Tensor], x_hat: Union[np.ndarray, torch.Tensor]):
    """Mean squared error over all pixels and channels, on [0, 1] scale."""
    if torch.is_tensor(x) or torch.is_tensor(x_hat):
        if x.shape != x_hat.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        return torch.mean((x - x_hat) ** 2)
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def bpp(total_bits: float, height: int, width: int) -> float:
    """Bits per pixel: total_bits / (H * W)."""
    if height <= 0 or width <= 0:
        raise ValueError(f"pixel count must be positive, got {height}x{width}")
    return float(total_bits) / (height * width)


@dataclass(frozen=True)
class RateReport:
    """Bit count for one image together with its per-pixel normalization."""

    total_bits: float
    pixel_count: int
    bpp: float

    @classmethod
    def from_bits(cls, total_bits: float, height: int, width: int) -> "RateReport":
        return cls(
            total_bits=float(total_bits),
            pixel_count=height * width,
            bpp=bpp(total_bits, height, width),
        )


class CompressionModel(nn.Module):
    """Interface consumed by the trainer and evaluator.

    ``forward`` maps a (B, 3, H, W) batch to (x_hat, rate_y, rate_z) where
    x_hat has the input's shape and the rates are scalar bit-count tensors
    for the batch, differentiable with respect to the parameters.
    """

    # spatial downsampling factor inputs are padded to a multiple of
    stride: int = 1

    @abstractmethod
    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raise NotImplementedError


class IdentityCodec(CompressionModel):
    """Returns the input unchanged at zero rate; an evaluation-path stub."""

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        zero = torch.zeros((), dtype=x.dtype)
        return x, zero, zero


def _gaussian_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2.0 ** -0.5))


LIKELIHOOD_FLOOR = 1e-9


class FactorizedPrior(nn.Module):
    """Per-channel logistic prior over the quantized hyper-latent.

    Location and scale are learned per channel; the likelihood of an integer
    value is the CDF difference across its unit quantization bin.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        self.log_scale = nn.Parameter(torch.zeros(channels))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.training:
            z_hat = z + torch.empty_like(z).uniform_(-0.5, 0.5)
        else:
            z_hat = torch.round(z)
        centered = z_hat - self.loc.view(1, -1, 1, 1)
        scale = torch.exp(self.log_scale).view(1, -1, 1, 1)
        likelihood = torch.sigmoid((centered + 0.5) / scale) - torch.sigmoid(
            (centered - 0.5) / scale
        )
        return z_hat, likelihood.clamp(LIKELIHOOD_FLOOR, 1.0)


def _conditional_gaussian(
    y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, training: bool
) -> tuple[torch.Tensor, torch.Tensor]:
    if training:
        y_hat = y + torch.empty_like(y).uniform_(-0.5, 0.5)
    else:
        y_hat = torch.round(y - mu) + mu
    centered = y_hat - mu
    likelihood = _gaussian_cdf((centered + 0.5) / sigma) - _gaussian_cdf(
        (centered - 0.5) / sigma
    )
    return y_hat, likelihood.clamp(LIKELIHOOD_FLOOR, 1.0)


class TinyHyperprior(CompressionModel):
    """Three-layer analysis/synthesis transforms with a hyperprior.

    The analysis transform downsamples by 8, the hyper-analysis by a further
    4 (total stride 32). The hyper-decoder predicts mean and scale of a
    conditional Gaussian over y. Inputs whose sides are not multiples of the
    stride are reflection-padded (replicate when the image is smaller than
    the padding) and the reconstruction is cropped back, so x_hat always
    matches x's shape.
    """

    stride = 32

    def __init__(self, channels: int = 32):
        super().__init__()
        n = channels
        self.g_a = nn.Sequential(
            nn.Conv2d(3, n, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(n, n, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(n, n, 5, stride=2, padding=2),
        )
        self.g_s = nn.Sequential(
            nn.ConvTranspose2d(n, n, 5, stride=2, padding=2, output_padding=1), nn.ReLU(),
            nn.ConvTranspose2d(n, n, 5, stride=2, padding=2, output_padding=1), nn.ReLU(),
            nn.ConvTranspose2d(n, 3, 5, stride=2, padding=2, output_padding=1),
        )
        self.h_a = nn.Sequential(
            nn.Conv2d(n, n, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(n, n, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(n, n, 5, stride=2, padding=2),
        )
        self.h_s = nn.Sequential(
            nn.ConvTranspose2d(n, n, 5, stride=2, padding=2, output_padding=1), nn.ReLU(),
            nn.ConvTranspose2d(n, n, 5, stride=2, padding=2, output_padding=1), nn.ReLU(),
            nn.Conv2d(n, 2 * n, 3, stride=1, padding=1),
        )
        self.z_prior = FactorizedPrior(n)

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        height, width = x.shape[2], x.shape[3]
        pad_h = (-height) % self.stride
        pad_w = (-width) % self.stride
        if pad_h == 0 and pad_w == 0:
            return x
        mode = "reflect" if pad_h < height and pad_w < width else "replicate"
        return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got shape {tuple(x.shape)}")
        height, width = x.shape[2], x.shape[3]
        padded = self._pad(x)
        y = self.g_a(padded)
        z = self.h_a(y)
        z_hat, z_likelihood = self.z_prior(z)
        params = self.h_s(z_hat)
        mu, raw_scale = params.chunk(2, dim=1)
        sigma = 1e-2 + F.softplus(raw_scale)
        y_hat, y_likelihood = _conditional_gaussian(y, mu, sigma, self.training)
        x_hat = self.g_s(y_hat)[:, :, :height, :width]
        return x_hat, rate_loss(y_likelihood), rate_loss(z_likelihood)
