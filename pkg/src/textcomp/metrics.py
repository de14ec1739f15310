"""Text-quality and fidelity metrics.

Character/word error rates from a minimal edit alignment, PSNR, greedy logit
decoding, and the Bjontegaard-delta family (BD-Rate plus the quality-axis
analogues BD-CER / BD-WER / BD-PSNR) computed with a shape-preserving
piecewise-cubic interpolant.

File formats owned here:

* results CSV: ``image_id,bpp,cer,wer,psnr``, one row per image, then a
  ``MEAN`` summary row;
* curve CSV: ``label,metric_kind,bpp,value``;
* BD report: key = value text with reference/target labels, metric, value,
  overlap interval, and validity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .core import EvalRecord, RDCurve, RDPoint

# Floor applied to CER/WER values before the log transform in bd_metric;
# exact zeros would otherwise make the integral undefined.
LOG_METRIC_FLOOR = 1e-6

# Exact reconstructions have infinite PSNR; curves need a finite value.
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class EditCounts:
    """Edit-operation counts from a minimal alignment.

    Satisfies S + D + C = len(reference) and S + I + C = len(hypothesis),
    and S + D + I equals the Levenshtein distance.
    """

    S: int
    D: int
    I: int
    C: int

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(
            self.S + other.S, self.D + other.D, self.I + other.I, self.C + other.C
        )


def edit_counts(reference: Sequence, hypothesis: Sequence) -> EditCounts:
    """Count substitutions, deletions, insertions, and correct items.

    Uses unit-cost Levenshtein alignment. When several minimal alignments
    exist, the backtrace prefers substitution over insertion over deletion,
    making the counts deterministic.
    """
    n, m = len(reference), len(hypothesis)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)

    s = d = ins_count = c = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            step = dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            if step == dist[i, j]:
                if reference[i - 1] == hypothesis[j - 1]:
                    c += 1
                else:
                    s += 1
                i -= 1
                j -= 1
                continue
        if j > 0 and dist[i, j - 1] + 1 == dist[i, j]:
            ins_count += 1
            j -= 1
            continue
        d += 1
        i -= 1
    return EditCounts(S=s, D=d, I=ins_count, C=c)


def cer(counts: EditCounts) -> float:
    """Character error rate (S + D + I) / (S + D + C). May exceed 1.

    Raises ValueError when the reference is empty (denominator zero); callers
    skip and flag such regions instead of defining 0/0.
    """
    denom = counts.S + counts.D + counts.C
    if denom == 0:
        raise ValueError("empty reference: CER denominator is zero")
    return (counts.S + counts.D + counts.I) / denom


def wer(region_results: Sequence[tuple[str, str]]) -> float:
    """Word error rate over region-paired (reference, hypothesis) words.

    Each valid text region contributes exactly one word and recognition runs
    on the corresponding region of the reconstruction, so word insertions and
    deletions cannot occur: WER = mismatched / total <= 1.
    """
    if not region_results:
        raise ValueError("empty region list: image has no words to score")
    mismatched = sum(1 for ref, hyp in region_results if ref != hyp)
    return mismatched / len(region_results)


def decode_logits(v: np.ndarray, charset: Sequence[str], eos_index: int = 0) -> str:
    """Greedy per-position argmax decode, truncated at the first end marker.

    Ties break to the lowest charset index (numpy argmax order), so identical
    logits always decode to identical strings.
    """
    arr = np.asarray(v)
    if arr.ndim != 2 or arr.shape[1] != len(charset):
        raise ValueError(f"logits shape {arr.shape} does not match charset size {len(charset)}")
    indices = np.argmax(arr, axis=1)
    chars = []
    for idx in indices:
        if idx == eos_index:
            break
        chars.append(charset[idx])
    return "".join(chars)


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB on [0, 1]-scale images, capped at 99 dB.

    The cap keeps curves containing exact reconstructions integrable.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


@dataclass(frozen=True)
class BDResult:
    """A Bjontegaard delta in percent, with the interval it was computed on.

    ``value`` is meaningful only when ``valid`` is true; curves whose ranges
    do not overlap produce ``valid=False``. ``flags`` records non-fatal
    adjustments such as flooring a zero CER point before the log transform.
    """

    value: float
    overlap: tuple[float, float]
    valid: bool
    flags: tuple[str, ...] = ()


def _prepare(xs: np.ndarray, ys: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    if np.any(np.diff(xs) <= 0):
        raise ValueError(f"curve {label!r} has duplicate abscissa values; cannot interpolate")
    return xs, ys


def _mean_curve_difference(
    ref_x: np.ndarray,
    ref_y: np.ndarray,
    tgt_x: np.ndarray,
    tgt_y: np.ndarray,
    ref_label: str,
    tgt_label: str,
) -> tuple[Optional[float], Optional[float], tuple[float, float], bool]:
    """Mean of (target - reference) curves over their overlapping x interval.

    Returns (mean difference, mean of reference, overlap, valid). Integration
    uses the exact antiderivative of the monotone piecewise-cubic interpolant,
    which cannot oscillate on the short 4-9 point curves BD is applied to.
    """
    ref_x, ref_y = _prepare(ref_x, ref_y, ref_label)
    tgt_x, tgt_y = _prepare(tgt_x, tgt_y, tgt_label)
    lo = max(ref_x.min(), tgt_x.min())
    hi = min(ref_x.max(), tgt_x.max())
    if not hi > lo:
        return None, None, (lo, hi), False
    ref_integral = PchipInterpolator(ref_x, ref_y).antiderivative()
    tgt_integral = PchipInterpolator(tgt_x, tgt_y).antiderivative()
    span = hi - lo
    ref_mean = (ref_integral(hi) - ref_integral(lo)) / span
    tgt_mean = (tgt_integral(hi) - tgt_integral(lo)) / span
    return float(tgt_mean - ref_mean), float(ref_mean), (float(lo), float(hi)), True


def _check_bd_inputs(reference: RDCurve, target: RDCurve) -> None:
    if len(reference.points) < 3 or len(target.points) < 3:
        raise ValueError("Bjontegaard deltas need at least 3 points per curve")
    if reference.metric_kind != target.metric_kind:
        raise ValueError(
            f"metric kinds differ: {reference.metric_kind!r} vs {target.metric_kind!r}"
        )


def bd_rate(reference: RDCurve, target: RDCurve) -> BDResult:
    """Average rate change (percent) of target vs reference at equal quality.

    Interpolates log10(bpp) as a function of the quality metric, integrates
    the difference over the overlapping quality interval, and maps the mean
    log-rate difference back to percent. Negative values mean the target
    needs fewer bits for the same quality.
    """
    _check_bd_inputs(reference, target)
    diff, _, overlap, valid = _mean_curve_difference(
        reference.values,
        np.log10(reference.bpps),
        target.values,
        np.log10(target.bpps),
        reference.label,
        target.label,
    )
    if not valid:
        return BDResult(value=float("nan"), overlap=overlap, valid=False)
    return BDResult(value=(10.0 ** diff - 1.0) * 100.0, overlap=overlap, valid=True)


def bd_metric(reference: RDCurve, target: RDCurve, metric_kind: str) -> BDResult:
    """Average quality change (percent) of target vs reference at equal bpp.

    The metric is interpolated as a function of log10(bpp). CER/WER are
    multiplicative quantities, so they are log10-transformed before
    integration and the mean log difference maps to a geometric-mean
    percentage change. PSNR is integrated untransformed and reported as the
    mean dB difference relative to the reference mean, in percent.
    """
    _check_bd_inputs(reference, target)
    if metric_kind != reference.metric_kind:
        raise ValueError(
            f"requested {metric_kind!r} but curves carry {reference.metric_kind!r}"
        )
    flags: list[str] = []
    if metric_kind in ("cer", "wer"):
        ref_vals, tgt_vals = reference.values, target.values
        if (ref_vals < LOG_METRIC_FLOOR).any() or (tgt_vals < LOG_METRIC_FLOOR).any():
            flags.append(f"metric values floored at {LOG_METRIC_FLOOR} before log transform")
        ref_y = np.log10(np.maximum(ref_vals, LOG_METRIC_FLOOR))
        tgt_y = np.log10(np.maximum(tgt_vals, LOG_METRIC_FLOOR))
    elif metric_kind == "psnr":
        ref_y, tgt_y = reference.values, target.values
    else:
        raise ValueError(f"unknown metric kind {metric_kind!r}")

    diff, ref_mean, log_overlap, valid = _mean_curve_difference(
        np.log10(reference.bpps),
        ref_y,
        np.log10(target.bpps),
        tgt_y,
        reference.label,
        target.label,
    )
    # The integration axis is log10(bpp); report the overlap in bpp.
    overlap = (10.0 ** log_overlap[0], 10.0 ** log_overlap[1])
    if not valid:
        return BDResult(value=float("nan"), overlap=overlap, valid=False, flags=tuple(flags))
    if metric_kind == "psnr":
        if ref_mean == 0.0:
            return BDResult(value=float("nan"), overlap=overlap, valid=False,
                            flags=tuple(flags) + ("reference PSNR mean is zero",))
        value = diff / ref_mean * 100.0
    else:
        value = (10.0 ** diff - 1.0) * 100.0
    return BDResult(value=value, overlap=overlap, valid=True, flags=tuple(flags))


def unweighted_mean(values: Sequence[float]) -> float:
    """Plain arithmetic mean; the aggregation everything here averages with."""
    if not values:
        raise ValueError("cannot average an empty sequence")
    return float(sum(values) / len(values))


def aggregate(
    records: Sequence[EvalRecord],
) -> tuple[Optional[float], Optional[float], float, float]:
    """Unweighted per-image means: (CER, WER, PSNR, BPP).

    Images without text regions carry ``cer=None``/``wer=None`` and are
    excluded from the text means (None is returned if no image has text);
    they still count toward PSNR and BPP.
    """
    if not records:
        raise ValueError("cannot aggregate zero records")
    cers = [r.cer for r in records if r.cer is not None]
    wers = [r.wer for r in records if r.wer is not None]
    mean_cer = unweighted_mean(cers) if cers else None
    mean_wer = unweighted_mean(wers) if wers else None
    mean_psnr = unweighted_mean([r.psnr for r in records])
    mean_bpp = unweighted_mean([r.bpp for r in records])
    return mean_cer, mean_wer, mean_psnr, mean_bpp


# ----------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------

RESULTS_HEADER = "image_id,bpp,cer,wer,psnr"
CURVE_HEADER = "label,metric_kind,bpp,value"


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def write_results_csv(path: Path, records: Sequence[EvalRecord]) -> None:
    """Write per-image rows sorted by image_id, then a MEAN summary row."""
    records = sorted(records, key=lambda r: r.image_id)
    lines = [RESULTS_HEADER]
    for r in records:
        lines.append(f"{r.image_id},{_fmt(r.bpp)},{_fmt(r.cer)},{_fmt(r.wer)},{_fmt(r.psnr)}")
    if records:
        mean_cer, mean_wer, mean_psnr, mean_bpp = aggregate(records)
        lines.append(f"MEAN,{_fmt(mean_bpp)},{_fmt(mean_cer)},{_fmt(mean_wer)},{_fmt(mean_psnr)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results_csv(path: Path) -> list[EvalRecord]:
    """Read per-image rows back; the MEAN summary row is skipped."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: not a results CSV (bad header)")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        image_id, bpp, cer_s, wer_s, psnr_s = line.split(",")
        if image_id == "MEAN":
            continue
        out.append(
            EvalRecord(
                image_id=image_id,
                bpp=float(bpp),
                cer=float(cer_s) if cer_s else None,
                wer=float(wer_s) if wer_s else None,
                psnr=float(psnr_s),
            )
        )
    return out


def write_curve_csv(path: Path, curves: Sequence[RDCurve]) -> None:
    lines = [CURVE_HEADER]
    for curve in curves:
        for p in curve.points:
            lines.append(f"{curve.label},{curve.metric_kind},{_fmt(p.bpp)},{_fmt(p.value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path: Path) -> list[RDCurve]:
    """Read all curves from a curve CSV, grouped by (label, metric_kind)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CURVE_HEADER:
        raise ValueError(f"{path}: not a curve CSV (bad header)")
    groups: dict[tuple[str, str], list[RDPoint]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        label, kind, bpp, value = line.split(",")
        groups.setdefault((label, kind), []).append(RDPoint(float(bpp), float(value)))
    return [
        RDCurve(label=label, metric_kind=kind, points=pts)
        for (label, kind), pts in sorted(groups.items())
    ]


def format_bd_report(
    reference_label: str,
    target_label: str,
    metric: str,
    result: BDResult,
) -> str:
    lines = [
        "textcomp-bd-report v1",
        f"reference = {reference_label}",
        f"target = {target_label}",
        f"metric = {metric}",
        f"valid = {'true' if result.valid else 'false'}",
        f"overlap_lo = {_fmt(result.overlap[0])}",
        f"overlap_hi = {_fmt(result.overlap[1])}",
    ]
    if result.valid:
        lines.append(f"value_percent = {_fmt(result.value)}")
    for flag in result.flags:
        lines.append(f"flag = {flag}")
    return "\n".join(lines) + "\n"
