"""Adapters wrapping pretrained OCR models behind the textpipe interfaces.

Production-scale runs use a pretrained character-region detector (the
CRAFT model shipped with easyocr) and a pretrained scene-text recognizer
(PARSeq via torch.hub). Both pull large weights over the network on first
use, so this module is never imported by the rest of the package or by the
test suite; install the ``ocr`` extra to use it.

The detector returns axis-aligned hulls of whatever quadrilaterals the
underlying model produces, clipped to the image and with degenerate boxes
dropped, preserving the model's output order.
"""

from __future__ import annotations

from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import BBox, validate_bbox, validate_image
from .textpipe import TextDetector, TextRecognizer


class EasyOCRDetector(TextDetector):
    """CRAFT text detection via the easyocr library."""

    def __init__(self, languages: tuple[str, ...] = ("en",), gpu: bool = False):
        try:
            import easyocr
        except ImportError as exc:
            raise ImportError(
                "EasyOCRDetector needs the easyocr package; install the 'ocr' extra"
            ) from exc
        self._reader = easyocr.Reader(list(languages), gpu=gpu)

    def detect(self, image: np.ndarray) -> list[BBox]:
        arr = validate_image(image)
        height, width = arr.shape[0], arr.shape[1]
        as_uint8 = np.round(arr * 255.0).astype(np.uint8)
        # easyocr assumes ndarray input is BGR (the OpenCV convention)
        horizontal, free = self._reader.detect(as_uint8[:, :, ::-1])
        boxes: list[BBox] = []

        def add(x0: float, y0: float, x1: float, y1: float) -> None:
            box = BBox(
                max(0, int(np.floor(x0))),
                max(0, int(np.floor(y0))),
                min(width, int(np.ceil(x1))),
                min(height, int(np.ceil(y1))),
            )
            if validate_bbox(box, (height, width)):
                boxes.append(box)

        for x_min, x_max, y_min, y_max in horizontal[0]:
            add(x_min, y_min, x_max, y_max)
        for quad in free[0]:
            pts = np.asarray(quad, dtype=np.float64)
            add(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
        return boxes


class ParseqRecognizer(TextRecognizer):
    """PARSeq scene-text recognition via torch.hub ('baudm/parseq').

    Exposes the model's raw per-position logits. The torch-tensor path keeps
    the autograd graph intact, so reconstructed crops can be recognized
    differentiably during training.
    """

    supports_gradients = True

    def __init__(self, device: str = "cpu"):
        self.device = device
        self._model = (
            torch.hub.load("baudm/parseq", "parseq", pretrained=True)
            .eval()
            .to(device)
        )
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._img_size = tuple(self._model.hparams.img_size)  # (H, W)
        charset = list(self._model.hparams.charset_test)
        # position 0 of the model's output distribution is the end marker
        self.charset = ("<eos>",) + tuple(charset)
        probe = torch.zeros(1, 3, *self._img_size, device=device)
        with torch.no_grad():
            out = self._model(probe)
        if out.ndim != 3 or out.shape[2] != len(self.charset):
            raise RuntimeError(
                f"unexpected PARSeq output shape {tuple(out.shape)} for "
                f"charset size {len(self.charset)}; the hub model layout changed"
            )
        self.max_len = int(out.shape[1])

    def _forward(self, crop: torch.Tensor) -> torch.Tensor:
        x = crop.permute(2, 0, 1).unsqueeze(0).to(self.device)
        x = F.interpolate(x, size=self._img_size, mode="bicubic", align_corners=False)
        x = (x - 0.5) / 0.5
        return self._model(x)[0]

    def recognize(
        self, crop: Union[np.ndarray, torch.Tensor]
    ) -> Union[np.ndarray, torch.Tensor]:
        if isinstance(crop, torch.Tensor):
            if crop.ndim != 3 or crop.shape[2] != 3:
                raise ValueError(f"crop must be h x w x 3, got shape {tuple(crop.shape)}")
            return self._forward(crop.to(torch.float32))
        arr = np.asarray(crop, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"crop must be h x w x 3, got shape {arr.shape}")
        with torch.no_grad():
            out = self._forward(torch.from_numpy(np.ascontiguousarray(arr)))
        return out.cpu().to(torch.float32).numpy()
