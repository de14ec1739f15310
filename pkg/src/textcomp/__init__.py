"""Text-aware learned image compression.

A small rate-distortion codec trained with an extra penalty that keeps the
logits of a text recognizer stable between the original image and its
reconstruction, so that compressed documents stay machine-readable. Ships
with region caching, CER/WER/PSNR evaluation, Bjontegaard-delta reports, and
a CLI (``textcomp --help``).
"""

__version__ = "0.1.0"

from .compress import (
    CompressionModel,
    IdentityCodec,
    RateReport,
    TinyHyperprior,
    bpp,
    distortion,
    rate_loss,
)
from .core import (
    BBox,
    EvalRecord,
    RDCurve,
    RDPoint,
    RegionCacheEntry,
    RegionRecord,
    TrainConfig,
    clamp_image,
    validate_bbox,
    validate_image,
    validate_logits,
)
from .data import (
    DatasetManifest,
    LoadedSample,
    ManifestEntry,
    ingest,
    list_images,
    load_image,
    load_samples,
    read_manifest,
    save_image,
    synth_text_image,
    write_manifest,
)
from .evaluate import evaluate_dataset, evaluate_image, rd_points
from .metrics import (
    BDResult,
    EditCounts,
    aggregate,
    bd_metric,
    bd_rate,
    cer,
    decode_logits,
    edit_counts,
    format_bd_report,
    psnr,
    read_curve_csv,
    read_results_csv,
    wer,
    write_curve_csv,
    write_results_csv,
)
from .textloss import (
    TextLossBreakdown,
    TotalLossBreakdown,
    crop,
    text_logit_loss,
    total_loss,
)
from .textpipe import (
    CacheFormatError,
    CacheNotFoundError,
    FixedBoxDetector,
    InkTextDetector,
    StubRecognizer,
    TextDetector,
    TextRecognizer,
    build_cache,
    english_filter,
    has_cache,
    load_cache,
    save_cache,
)
from .trainer import (
    SweepJobResult,
    SweepPlan,
    epoch_order,
    load_checkpoint,
    needs_extension,
    run_sweep,
    save_checkpoint,
    train,
)

__all__ = [
    "__version__",
    "BBox",
    "BDResult",
    "CacheFormatError",
    "CacheNotFoundError",
    "CompressionModel",
    "DatasetManifest",
    "EditCounts",
    "EvalRecord",
    "FixedBoxDetector",
    "IdentityCodec",
    "InkTextDetector",
    "LoadedSample",
    "ManifestEntry",
    "RDCurve",
    "RDPoint",
    "RateReport",
    "RegionCacheEntry",
    "RegionRecord",
    "StubRecognizer",
    "SweepJobResult",
    "SweepPlan",
    "TextDetector",
    "TextLossBreakdown",
    "TextRecognizer",
    "TinyHyperprior",
    "TotalLossBreakdown",
    "TrainConfig",
    "aggregate",
    "bd_metric",
    "bd_rate",
    "bpp",
    "build_cache",
    "cer",
    "clamp_image",
    "crop",
    "decode_logits",
    "distortion",
    "edit_counts",
    "english_filter",
    "epoch_order",
    "evaluate_dataset",
    "evaluate_image",
    "format_bd_report",
    "has_cache",
    "ingest",
    "list_images",
    "load_cache",
    "load_checkpoint",
    "load_image",
    "load_samples",
    "needs_extension",
    "psnr",
    "rate_loss",
    "rd_points",
    "read_curve_csv",
    "read_manifest",
    "read_results_csv",
    "run_sweep",
    "save_cache",
    "save_checkpoint",
    "save_image",
    "synth_text_image",
    "text_logit_loss",
    "total_loss",
    "train",
    "validate_bbox",
    "validate_image",
    "validate_logits",
    "wer",
    "write_curve_csv",
    "write_manifest",
    "write_results_csv",
]
