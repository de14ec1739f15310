"""Command-line surface: precompute, train, eval, bd, sweep.

Every command is a batch job that reads/writes files; outputs are
deterministic for identical inputs and seeds (wall-clock timestamps go only
to the train.log sidecar). Exit codes: 0 success, 1 fatal error, 2 finished
with partial skips or job failures, 3 BD curves do not overlap.

The cache directory can always be forced with the TEXTCOMP_CACHE
environment variable, which overrides --cache flags and config keys.

Run-config files are ``key = value`` lines ('#' starts a comment). Unknown
keys are rejected, and the effective configuration is echoed into the
output directory for auditability.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .compress import CompressionModel, IdentityCodec, TinyHyperprior
from .core import RDCurve, RDPoint, TrainConfig
from .data import ingest, list_images, load_samples, write_manifest
from .evaluate import evaluate_dataset
from .metrics import (
    BDResult,
    bd_metric,
    bd_rate,
    format_bd_report,
    read_curve_csv,
    write_curve_csv,
    write_results_csv,
)
from .textpipe import InkTextDetector, StubRecognizer, TextDetector, TextRecognizer
from .trainer import SweepPlan, job_name, load_checkpoint, run_sweep, train

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2
EXIT_NO_OVERLAP = 3


# ----------------------------------------------------------------------
# Run-config files
# ----------------------------------------------------------------------

_CONFIG_PARSERS = {
    "lmbda": float,
    "kappa": float,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "m_min": float,
    "sigma_max": float,
    "seed": int,
    "max_steps": int,
    "checkpoint_every": int,
}
_PATH_KEYS = ("data", "cache", "out", "eval_data", "eval_cache")
_EXTRA_PARSERS = {
    "model_channels": int,
    "recognizer_seed": int,
    "limit": int,
    "eval_limit": int,
    "lambdas": lambda s: tuple(float(v) for v in s.split(",") if v.strip()),
    "kappas": lambda s: tuple(float(v) for v in s.split(",") if v.strip()),
}


def parse_config_file(path: Path) -> dict[str, str]:
    """Read ``key = value`` lines; comments and blanks are skipped."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if " = " not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition(" = ")
        key = key.strip()
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate config key {key!r}")
        out[key] = value.strip()
    return out


def typed_config(raw: dict[str, str], allowed: dict, required: Sequence[str]) -> dict:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ValueError(f"unknown config key {unknown[0]!r}")
    missing = sorted(set(required) - set(raw))
    if missing:
        raise ValueError(f"missing config key {missing[0]!r}")
    out = {}
    for key, value in raw.items():
        parser = allowed[key]
        try:
            out[key] = parser(value) if parser is not None else value
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: bad value {value!r} ({exc})") from exc
    return out


def echo_config(path: Path, effective: dict) -> None:
    lines = [f"{key} = {effective[key]}" for key in sorted(effective)]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_cache(flag_value: Optional[str]) -> Path:
    env = os.environ.get("TEXTCOMP_CACHE")
    if env:
        return Path(env)
    if flag_value:
        return Path(flag_value)
    raise ValueError("no cache directory: pass --cache or set TEXTCOMP_CACHE")


def _make_detector(name: str) -> TextDetector:
    if name == "ink":
        return InkTextDetector()
    if name == "easyocr":
        from .pretrained import EasyOCRDetector

        return EasyOCRDetector()
    raise ValueError(f"unknown detector {name!r}")


def _make_recognizer(name: str, seed: int) -> TextRecognizer:
    if name == "stub":
        return StubRecognizer(seed=seed)
    if name == "parseq":
        from .pretrained import ParseqRecognizer

        return ParseqRecognizer()
    raise ValueError(f"unknown recognizer {name!r}")


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_precompute(args: argparse.Namespace) -> int:
    cache_root = resolve_cache(args.cache)
    data_dir = Path(args.data)
    if not data_dir.is_dir() or not list_images(data_dir):
        print(f"error: no images found in {data_dir}", file=sys.stderr)
        return EXIT_FATAL
    cfg = TrainConfig(lmbda=1.0, m_min=args.m_min, sigma_max=args.sigma_max)
    detector = _make_detector(args.detector)
    recognizer = _make_recognizer(args.recognizer, args.recognizer_seed)
    cache_root.mkdir(parents=True, exist_ok=True)
    manifest = ingest(
        data_dir, args.split, detector, recognizer, cfg, cache_root,
        rebuild=args.rebuild, jobs=args.jobs,
    )
    out = Path(args.out) if args.out else cache_root / f"{args.split}_manifest.txt"
    write_manifest(manifest, out)
    print(f"manifest: {out} ({len(manifest.entries)} entries)")
    for warning in manifest.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return EXIT_PARTIAL if manifest.warnings else EXIT_OK


_TRAIN_CONFIG_KEYS = dict(_CONFIG_PARSERS)
_TRAIN_CONFIG_KEYS.update({k: None for k in ("data", "cache", "out")})
_TRAIN_CONFIG_KEYS.update(
    {k: _EXTRA_PARSERS[k] for k in ("model_channels", "recognizer_seed", "limit")}
)


def cmd_train(args: argparse.Namespace) -> int:
    raw = parse_config_file(args.config)
    cfg_map = typed_config(raw, _TRAIN_CONFIG_KEYS, required=("lmbda", "data", "cache", "out"))
    if args.kappa is not None:
        cfg_map["kappa"] = args.kappa
    data_dir = Path(cfg_map.pop("data"))
    cache_root = resolve_cache(str(cfg_map.pop("cache")))
    out_dir = Path(cfg_map.pop("out"))
    channels = cfg_map.pop("model_channels", 32)
    recognizer_seed = cfg_map.pop("recognizer_seed", 0)
    limit = cfg_map.pop("limit", None)
    config = TrainConfig.from_dict(cfg_map)

    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    with log_path.open("a") as log:
        log.write(f"start {datetime.now().isoformat()}\n")

    detector = InkTextDetector()
    recognizer = StubRecognizer(seed=recognizer_seed)
    manifest = ingest(data_dir, "train", detector, recognizer, config, cache_root)
    if not manifest.entries:
        print("error: no training images survive the retention rule", file=sys.stderr)
        return EXIT_FATAL
    samples = load_samples(manifest, data_dir, cache_root, limit=limit)

    effective = dict(config.to_dict())
    effective.update(
        {"data": data_dir, "cache": cache_root, "out": out_dir,
         "model_channels": channels, "recognizer_seed": recognizer_seed}
    )
    if limit is not None:
        effective["limit"] = limit
    echo_config(out_dir / "config.txt", effective)

    torch.manual_seed(config.seed)
    model = TinyHyperprior(channels=channels)
    resume = Path(args.resume) if args.resume else None
    checkpoint = train(config, samples, model, recognizer, out_dir, resume_from=resume)
    with log_path.open("a") as log:
        log.write(f"end {datetime.now().isoformat()}\n")
    print(f"checkpoint: {checkpoint}")
    print(f"trace: {out_dir / 'trace.csv'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cache_root = resolve_cache(args.cache)
    data_dir = Path(args.data)
    if args.model == "identity":
        model: CompressionModel = IdentityCodec()
    else:
        if not args.checkpoint or not Path(args.checkpoint).is_file():
            print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
            return EXIT_FATAL
        model = TinyHyperprior(channels=args.model_channels)
        load_checkpoint(Path(args.checkpoint), model, optimizer=None, restore_rng=False)
    recognizer = StubRecognizer(seed=args.recognizer_seed)
    detector = InkTextDetector()
    cfg = TrainConfig(lmbda=1.0, m_min=args.m_min, sigma_max=args.sigma_max)
    manifest = ingest(data_dir, "test", detector, recognizer, cfg, cache_root)
    if not manifest.entries:
        print(f"error: no images found in {data_dir}", file=sys.stderr)
        return EXIT_FATAL
    samples = load_samples(manifest, data_dir, cache_root, limit=args.limit)
    records = evaluate_dataset(model, recognizer, samples, jobs=args.jobs)
    write_results_csv(Path(args.out), records)
    print(f"results: {args.out} ({len(records)} images)")
    return EXIT_PARTIAL if manifest.warnings else EXIT_OK


def _select_curve(path: Path, kind: str, label: Optional[str]) -> RDCurve:
    curves = [c for c in read_curve_csv(path) if c.metric_kind == kind]
    if label is not None:
        curves = [c for c in curves if c.label == label]
    if not curves:
        raise ValueError(f"{path}: no curve with metric_kind={kind!r}"
                         + (f" label={label!r}" if label else ""))
    if len(curves) > 1:
        labels = [c.label for c in curves]
        raise ValueError(f"{path}: ambiguous curves {labels}; pass an explicit label")
    return curves[0]


def cmd_bd(args: argparse.Namespace) -> int:
    kind = args.quality if args.metric == "rate" else args.metric
    reference = _select_curve(Path(args.reference), kind, args.reference_label)
    target = _select_curve(Path(args.target), kind, args.target_label)
    if args.metric == "rate":
        result: BDResult = bd_rate(reference, target)
        metric_name = f"bd-rate (on {kind})"
    else:
        result = bd_metric(reference, target, args.metric)
        metric_name = f"bd-{args.metric}"
    report = format_bd_report(reference.label, target.label, metric_name, result)
    Path(args.out).write_text(report)
    print(report, end="")
    if not result.valid:
        print("error: curve ranges do not overlap", file=sys.stderr)
        return EXIT_NO_OVERLAP
    return EXIT_OK


_SWEEP_CONFIG_KEYS = dict(_CONFIG_PARSERS)
_SWEEP_CONFIG_KEYS.update({k: None for k in _PATH_KEYS})
_SWEEP_CONFIG_KEYS.update(_EXTRA_PARSERS)


def _plot_curves(curves: Sequence[RDCurve], metric: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for curve in curves:
        ax.plot(curve.bpps, curve.values, marker="o", label=curve.label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": "textcomp"})
    plt.close(fig)


def cmd_sweep(args: argparse.Namespace) -> int:
    raw = parse_config_file(args.config)
    cfg_map = typed_config(
        raw, _SWEEP_CONFIG_KEYS,
        required=("lmbda", "data", "cache", "out", "lambdas", "kappas"),
    )
    data_dir = Path(cfg_map.pop("data"))
    cache_root = resolve_cache(str(cfg_map.pop("cache")))
    out_dir = Path(cfg_map.pop("out"))
    eval_data = Path(cfg_map.pop("eval_data", data_dir))
    eval_cache = Path(cfg_map.pop("eval_cache", cache_root))
    channels = cfg_map.pop("model_channels", 32)
    recognizer_seed = cfg_map.pop("recognizer_seed", 0)
    limit = cfg_map.pop("limit", None)
    eval_limit = cfg_map.pop("eval_limit", None)
    lambdas = cfg_map.pop("lambdas")
    kappas = cfg_map.pop("kappas")
    base = TrainConfig.from_dict(cfg_map)

    out_dir.mkdir(parents=True, exist_ok=True)
    effective = dict(base.to_dict())
    effective.update(
        {"data": data_dir, "cache": cache_root, "out": out_dir,
         "eval_data": eval_data, "eval_cache": eval_cache,
         "model_channels": channels, "recognizer_seed": recognizer_seed,
         "lambdas": ",".join(repr(v) for v in lambdas),
         "kappas": ",".join(repr(v) for v in kappas)}
    )
    echo_config(out_dir / "config.txt", effective)

    detector = InkTextDetector()
    recognizer = StubRecognizer(seed=recognizer_seed)
    train_manifest = ingest(data_dir, "train", detector, recognizer, base, cache_root)
    if not train_manifest.entries:
        print("error: no training images survive the retention rule", file=sys.stderr)
        return EXIT_FATAL
    eval_manifest = ingest(eval_data, "test", detector, recognizer, base, eval_cache)
    train_samples = load_samples(train_manifest, data_dir, cache_root, limit=limit)
    eval_samples = load_samples(eval_manifest, eval_data, eval_cache, limit=eval_limit)

    plan = SweepPlan(lambdas=tuple(lambdas), kappas=tuple(kappas), base=base)
    results = run_sweep(
        plan, train_samples, eval_samples, recognizer,
        lambda: TinyHyperprior(channels=channels), out_dir,
    )

    failures = [r for r in results if r.status != "ok"]
    for r in failures:
        print(f"warning: job {job_name(r.config)} {r.status}", file=sys.stderr)

    curves: list[RDCurve] = []
    degenerate: list[str] = []
    for kappa in kappas:
        ok = [r for r in results if r.status == "ok" and r.config.kappa == kappa]
        for kind in ("cer", "wer", "psnr"):
            points = []
            for r in ok:
                value = getattr(r, kind)
                if value is not None and r.bpp and r.bpp > 0:
                    points.append((r.bpp, value))
            if not points:
                continue
            try:
                curves.append(
                    RDCurve(
                        label=f"kappa={kappa:g}",
                        metric_kind=kind,
                        points=[RDPoint(b, v) for b, v in points],
                    )
                )
            except ValueError as exc:
                # jobs can land on the same operating point (e.g. truncated
                # runs); drop the curve rather than abort the sweep
                degenerate.append(f"curve kappa={kappa:g}/{kind}: {exc}")
    if curves:
        write_curve_csv(out_dir / "curves.csv", curves)
        for kind in ("cer", "wer", "psnr"):
            kind_curves = [c for c in curves if c.metric_kind == kind]
            if kind_curves:
                _plot_curves(kind_curves, kind, out_dir / f"curve_{kind}.png")
        degenerate.extend(_write_sweep_bd_reports(curves, kappas, out_dir))
        print(f"curves: {out_dir / 'curves.csv'}")
    for message in degenerate:
        print(f"warning: {message}", file=sys.stderr)
    print(f"manifest: {out_dir / 'sweep_manifest.txt'}")
    return EXIT_PARTIAL if failures or degenerate else EXIT_OK


def _write_sweep_bd_reports(
    curves: Sequence[RDCurve], kappas: Sequence[float], out_dir: Path
) -> list[str]:
    """BD deltas of every kappa>0 arm against the kappa=0 baseline arm.

    Returns warnings for reports that could not be computed (e.g. a flat
    quality axis cannot serve as the integration variable for bd-rate);
    the rest of the reports are still written.
    """
    skipped: list[str] = []
    if 0.0 not in kappas:
        return skipped
    by_key = {(c.label, c.metric_kind): c for c in curves}
    for kappa in kappas:
        if kappa == 0.0:
            continue
        target_label = f"kappa={kappa:g}"
        for kind in ("cer", "wer", "psnr"):
            reference = by_key.get(("kappa=0", kind))
            target = by_key.get((target_label, kind))
            if reference is None or target is None:
                continue
            if len(reference.points) < 3 or len(target.points) < 3:
                continue
            try:
                result = bd_metric(reference, target, kind)
            except ValueError as exc:
                skipped.append(f"bd-{kind} kappa={kappa:g} skipped: {exc}")
            else:
                report = format_bd_report(
                    reference.label, target.label, f"bd-{kind}", result
                )
                (out_dir / f"bd_{kind}_kap{kappa:g}.txt").write_text(report)
            if kind == "cer":
                try:
                    rate_result = bd_rate(reference, target)
                except ValueError as exc:
                    skipped.append(f"bd-rate kappa={kappa:g} skipped: {exc}")
                else:
                    rate_report = format_bd_report(
                        reference.label, target.label, "bd-rate (on cer)", rate_result
                    )
                    (out_dir / f"bd_rate_kap{kappa:g}.txt").write_text(rate_report)
    return skipped


# ----------------------------------------------------------------------
# Parser wiring
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textcomp",
        description="Text-aware learned image compression: cache building, "
                    "training, evaluation, and Bjontegaard reports.",
    )
    parser.add_argument("--version", action="version", version=f"textcomp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="detect+recognize text regions into a cache")
    p.add_argument("--data", required=True, help="directory of PNG/JPG images")
    p.add_argument("--cache", help="cache directory (TEXTCOMP_CACHE overrides)")
    p.add_argument("--split", choices=("train", "test"), required=True)
    p.add_argument("--m-min", type=float, default=14.2, dest="m_min")
    p.add_argument("--sigma-max", type=float, default=2.0, dest="sigma_max")
    p.add_argument("--detector", choices=("ink", "easyocr"), default="ink")
    p.add_argument("--recognizer", choices=("stub", "parseq"), default="stub")
    p.add_argument("--recognizer-seed", type=int, default=0)
    p.add_argument("--rebuild", action="store_true", help="ignore existing cache entries")
    p.add_argument("--jobs", type=int, default=1, help="parallel image workers")
    p.add_argument("--out", help="manifest path (default <cache>/<split>_manifest.txt)")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train the reference codec on cached data")
    p.add_argument("--config", required=True, help="run-config file (key = value)")
    p.add_argument("--kappa", type=float, default=None,
                   help="override the config's text-loss weight (0 = baseline arm)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint into a results CSV")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", help="cache directory (TEXTCOMP_CACHE overrides)")
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--model", choices=("tiny", "identity"), default="tiny")
    p.add_argument("--model-channels", type=int, default=32)
    p.add_argument("--recognizer-seed", type=int, default=0)
    p.add_argument("--m-min", type=float, default=14.2, dest="m_min")
    p.add_argument("--sigma-max", type=float, default=2.0, dest="sigma_max")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel image workers")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bd", help="Bjontegaard delta between two curve CSVs")
    p.add_argument("--reference", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--metric", choices=("rate", "cer", "wer", "psnr"), required=True)
    p.add_argument("--quality", choices=("cer", "wer", "psnr"), default="cer",
                   help="quality axis used when --metric rate")
    p.add_argument("--reference-label", default=None)
    p.add_argument("--target-label", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bd)

    p = sub.add_parser("sweep", help="train a lambda x kappa grid and emit curves")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_FATAL
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
