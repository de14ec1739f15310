"""Per-image evaluation: reconstruct, measure rate, score text and fidelity.

Evaluation runs the model in eval mode (hard rounding in the entropy
models), clamps the reconstruction to [0, 1], and scores:

* bpp from the summed rate estimates;
* PSNR against the original;
* CER from pooled character edit counts over retained regions, where the
  reference text is the greedy decode of the cached ground-truth logits and
  the hypothesis is the decode of the reconstruction's crop;
* WER as the fraction of mismatched region words (regions pair one-to-one,
  so word insertions/deletions cannot occur).

Regions whose reference decodes to an empty string are skipped and do not
count toward either metric. Images with no usable regions carry cer=None /
wer=None and are excluded from text-metric averages.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import torch

from .compress import CompressionModel, bpp
from .core import EvalRecord, RDPoint, clamp_image
from .data import LoadedSample
from .metrics import EditCounts, aggregate, cer, decode_logits, edit_counts, psnr, wer
from .textloss import crop, _to_model_input
from .textpipe import TextRecognizer


def evaluate_image(
    model: CompressionModel,
    recognizer: TextRecognizer,
    sample: LoadedSample,
    dtype: torch.dtype = torch.float32,
) -> EvalRecord:
    height, width = sample.image.shape[0], sample.image.shape[1]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x_in = _to_model_input(sample.image, dtype)
            x_hat_b, rate_y, rate_z = model(x_in)
    finally:
        model.train(was_training)
    x_hat = clamp_image(
        x_hat_b.squeeze(0).permute(1, 2, 0).to(torch.float64).numpy()
    )
    bits = float(rate_y) + float(rate_z)
    psnr_value = psnr(sample.image, x_hat)

    char_counts = EditCounts(0, 0, 0, 0)
    word_pairs: list[tuple[str, str]] = []
    for record in sample.cache.retained_records():
        reference = decode_logits(record.logits, recognizer.charset)
        if not reference:
            continue  # empty reference: CER undefined, region not a word
        hypothesis = decode_logits(
            recognizer.recognize(crop(x_hat, record.bbox)), recognizer.charset
        )
        char_counts = char_counts + edit_counts(reference, hypothesis)
        word_pairs.append((reference, hypothesis))

    if word_pairs:
        cer_value: Optional[float] = cer(char_counts)
        wer_value: Optional[float] = wer(word_pairs)
    else:
        cer_value = None
        wer_value = None
    return EvalRecord(
        image_id=sample.image_id,
        bpp=bpp(bits, height, width),
        cer=cer_value,
        wer=wer_value,
        psnr=psnr_value,
    )


def evaluate_dataset(
    model: CompressionModel,
    recognizer: TextRecognizer,
    samples: Sequence[LoadedSample],
    dtype: torch.dtype = torch.float32,
    jobs: int = 1,
) -> list[EvalRecord]:
    """Per-image records sorted by id; ``jobs`` > 1 uses a thread pool.

    Forward passes are read-only and deterministic, so worker count never
    changes the result.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1:
        records = [evaluate_image(model, recognizer, s, dtype) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(
                pool.map(lambda s: evaluate_image(model, recognizer, s, dtype), samples)
            )
    records.sort(key=lambda r: r.image_id)
    return records


def rd_points(records: Sequence[EvalRecord]) -> dict[str, Optional[RDPoint]]:
    """Dataset means as one RDPoint per metric kind (None when undefined).

    Points need bpp > 0, so a zero-rate evaluation (identity stub) yields
    no points at all.
    """
    mean_cer, mean_wer, mean_psnr, mean_bpp = aggregate(records)
    if not mean_bpp > 0:
        return {"cer": None, "wer": None, "psnr": None}
    return {
        "cer": RDPoint(mean_bpp, mean_cer) if mean_cer is not None else None,
        "wer": RDPoint(mean_bpp, mean_wer) if mean_wer is not None else None,
        "psnr": RDPoint(mean_bpp, mean_psnr),
    }
