"""Training loop, deterministic checkpoints, and lambda/kappa sweeps.

Determinism contract: given the same config, samples, and initial model
state, a run writes byte-identical trace and checkpoint files, and a run
resumed from any checkpoint continues the exact loss trajectory of the
uninterrupted run. To that end:

* epoch shuffles derive from (seed, epoch), not from consumed RNG state;
* the torch RNG state (quantization noise) is stored in every checkpoint;
* checkpoints are a flat binary tensor archive written in a fixed order
  with no timestamps; run metadata lives in a structured-text sidecar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import evaluate
from .compress import CompressionModel
from .core import TrainConfig
from .data import LoadedSample
from .metrics import aggregate
from .textloss import total_loss
from .textpipe import TextRecognizer

TRACE_HEADER = "step,rate_y,rate_z,distortion,text,total"

CKPT_MAGIC = "textcomp-ckpt v1"
META_MAGIC = "textcomp-ckpt-meta v1"

_DTYPE_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
}
_NP_TO_DTYPE = {v: k for k, v in _DTYPE_TO_NP.items()}


def _flatten_state(model: CompressionModel, optimizer: torch.optim.Optimizer,
                   step: int, epoch: int, extended: bool) -> list[tuple[str, torch.Tensor]]:
    """Fixed-order (name, tensor) list covering everything a resume needs."""
    entries: list[tuple[str, torch.Tensor]] = []
    for key, tensor in model.state_dict().items():
        entries.append((f"model/{key}", tensor))
    for index, state in sorted(optimizer.state_dict()["state"].items()):
        for key in sorted(state):
            value = state[key]
            if torch.is_tensor(value):
                entries.append((f"opt/{index}/{key}", value))
            elif isinstance(value, int):
                entries.append((f"opt/{index}/{key}@pyint", torch.tensor([value], dtype=torch.int64)))
            elif isinstance(value, float):
                entries.append((f"opt/{index}/{key}@pyfloat", torch.tensor([value], dtype=torch.float64)))
            else:
                raise TypeError(f"cannot serialize optimizer state {key!r} of type {type(value)}")
    entries.append(("rng/torch", torch.get_rng_state()))
    entries.append(("meta/step", torch.tensor([step], dtype=torch.int64)))
    entries.append(("meta/epoch", torch.tensor([epoch], dtype=torch.int64)))
    entries.append(("meta/extended", torch.tensor([int(extended)], dtype=torch.int64)))
    return entries


def save_checkpoint(
    path: Path,
    model: CompressionModel,
    optimizer: torch.optim.Optimizer,
    step: int,
    epoch: int,
    extended: bool,
    config: TrainConfig,
) -> Path:
    """Write the flat tensor archive plus its .meta sidecar."""
    path = Path(path)
    entries = _flatten_state(model, optimizer, step, epoch, extended)
    header_lines = [CKPT_MAGIC]
    blobs = []
    for name, tensor in entries:
        t = tensor.detach().cpu().contiguous()
        np_dtype = _DTYPE_TO_NP.get(t.dtype)
        if np_dtype is None:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for entry {name!r}")
        blob = t.numpy().astype(np_dtype, copy=False).tobytes()
        shape = ",".join(str(d) for d in t.shape) or "-"
        header_lines.append(f"{name} {np_dtype} {shape} {len(blob)}")
        blobs.append(blob)
    header = ("\n".join(header_lines) + "\n\n").encode("utf-8")
    path.write_bytes(header + b"".join(blobs))

    meta_lines = [META_MAGIC, f"format = {CKPT_MAGIC}"]
    for key, value in sorted(config.to_dict().items()):
        meta_lines.append(f"config.{key} = {value!r}")
    meta_lines.append(f"step = {step}")
    meta_lines.append(f"epoch = {epoch}")
    meta_lines.append(f"extended = {extended}")
    meta_lines.append("optimizer = adam")
    meta_lines.append("weight_decay = 0")
    meta_lines.append("lr_schedule = constant")
    path.with_suffix(".meta").write_text("\n".join(meta_lines) + "\n")
    return path


def read_checkpoint(path: Path) -> dict[str, torch.Tensor]:
    """Parse the archive back into {name: tensor}."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: not a checkpoint archive (no header terminator)")
    lines = raw[:sep].decode("utf-8").splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: unrecognized checkpoint header")
    offset = sep + 2
    out: dict[str, torch.Tensor] = {}
    for line in lines[1:]:
        name, np_dtype, shape_s, nbytes_s = line.rsplit(" ", 3)
        nbytes = int(nbytes_s)
        blob = raw[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise ValueError(f"{path}: truncated blob for entry {name!r}")
        offset += nbytes
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        arr = np.frombuffer(blob, dtype=np_dtype).reshape(shape).copy()
        out[name] = torch.from_numpy(arr).to(_NP_TO_DTYPE[np_dtype])
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after last blob")
    return out


def load_checkpoint(
    path: Path,
    model: CompressionModel,
    optimizer: Optional[torch.optim.Optimizer] = None,
    restore_rng: bool = True,
) -> tuple[int, int, bool]:
    """Restore model (and optionally optimizer + RNG); returns (step, epoch, extended)."""
    entries = read_checkpoint(path)
    model_state = {
        name[len("model/"):]: t for name, t in entries.items() if name.startswith("model/")
    }
    model.load_state_dict(model_state)

    if optimizer is not None:
        fresh = optimizer.state_dict()
        state: dict[int, dict] = {}
        for name, tensor in entries.items():
            if not name.startswith("opt/"):
                continue
            _, index_s, key = name.split("/", 2)
            if key.endswith("@pyint"):
                value = int(tensor.item())
                key = key[: -len("@pyint")]
            elif key.endswith("@pyfloat"):
                value = float(tensor.item())
                key = key[: -len("@pyfloat")]
            else:
                value = tensor
            state.setdefault(int(index_s), {})[key] = value
        optimizer.load_state_dict({"state": state, "param_groups": fresh["param_groups"]})

    if restore_rng and "rng/torch" in entries:
        torch.set_rng_state(entries["rng/torch"].to(torch.uint8))
    step = int(entries["meta/step"].item())
    epoch = int(entries["meta/epoch"].item())
    extended = bool(entries["meta/extended"].item())
    return step, epoch, extended


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch, independent of RNG state."""
    return np.random.default_rng((seed, epoch)).permutation(count)


def _format_float(x: float) -> str:
    return repr(float(x))


CONVERGENCE_WINDOW = 5
CONVERGENCE_RELATIVE = 0.01


def needs_extension(epoch_means: Sequence[float]) -> bool:
    """True when the loss still moved more than 1% across the last 5 epochs.

    With fewer than 5 completed epochs there is nothing to test against and
    no extension happens.
    """
    if len(epoch_means) < CONVERGENCE_WINDOW:
        return False
    old = epoch_means[-CONVERGENCE_WINDOW]
    new = epoch_means[-1]
    return abs(new - old) / max(abs(old), 1e-12) > CONVERGENCE_RELATIVE


def train(
    config: TrainConfig,
    samples: Sequence[LoadedSample],
    model: CompressionModel,
    recognizer: Optional[TextRecognizer],
    out_dir: Path,
    resume_from: Optional[Path] = None,
) -> Path:
    """Gradient descent on the batch objective; returns the final checkpoint.

    Runs ``config.epochs`` epochs, extended once by the same amount when the
    convergence test fails, unless ``config.max_steps`` caps the run first.
    Writes ``trace.csv`` (one row per step: the loss of that step's batch
    before its update) and periodic checkpoints per ``checkpoint_every``.
    A non-finite loss aborts immediately; the last periodic checkpoint on
    disk remains valid.

    Resume restores parameters, optimizer moments, and the RNG state, so
    the continued loss trajectory matches the uninterrupted run exactly.
    Epoch-mean history does not survive a resume; the one-time extension
    decision is only made by uninterrupted runs.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    if config.kappa != 0 and recognizer is None:
        raise ValueError("kappa != 0 requires a recognizer")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    step = 0
    start_epoch = 0
    extended = False
    if resume_from is not None:
        step, _, extended = load_checkpoint(resume_from, model, optimizer)
    else:
        torch.manual_seed(config.seed)

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    if resume_from is not None:
        # position is derived from the step counter; a checkpoint written at
        # an epoch boundary resumes at the start of the next epoch
        start_epoch = step // steps_per_epoch
    epoch_means: list[float] = []
    trace_path = out_dir / "trace.csv"
    trace = trace_path.open("w")
    trace.write(TRACE_HEADER + "\n")

    def write_final() -> Path:
        return save_checkpoint(
            out_dir / "checkpoint.bin", model, optimizer, step, epoch, extended, config
        )

    model.train()
    planned_epochs = config.epochs if not extended else 2 * config.epochs
    epoch = start_epoch
    try:
        while epoch < planned_epochs:
            order = epoch_order(config.seed, epoch, len(samples))
            epoch_total = 0.0
            batches_done = 0
            start_batch = 0
            if resume_from is not None and epoch == start_epoch:
                start_batch = step - epoch * steps_per_epoch
            for b in range(start_batch, steps_per_epoch):
                chosen = order[b * config.batch_size : (b + 1) * config.batch_size]
                batch = [(samples[i].image, samples[i].cache) for i in chosen]
                breakdown = total_loss(batch, model, recognizer, config.lmbda, config.kappa)
                floats = breakdown.as_floats()
                if not np.isfinite(floats.total):
                    raise RuntimeError(
                        f"non-finite loss at step {step}; last periodic checkpoint retained"
                    )
                trace.write(
                    f"{step},{_format_float(floats.rate_y)},{_format_float(floats.rate_z)},"
                    f"{_format_float(floats.distortion)},{_format_float(floats.text)},"
                    f"{_format_float(floats.total)}\n"
                )
                trace.flush()
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                step += 1
                epoch_total += floats.total
                batches_done += 1
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(
                        out_dir / f"checkpoint_step{step:06d}.bin",
                        model, optimizer, step, epoch, extended, config,
                    )
                if config.max_steps is not None and step >= config.max_steps:
                    return write_final()
            if batches_done:
                epoch_means.append(epoch_total / batches_done)
            epoch += 1
            if epoch == planned_epochs and not extended and needs_extension(epoch_means):
                extended = True
                planned_epochs = 2 * config.epochs
        return write_final()
    finally:
        trace.close()


@dataclass(frozen=True)
class SweepPlan:
    """One training job per (lambda, kappa) pair on top of a base config."""

    lambdas: tuple[float, ...]
    kappas: tuple[float, ...]
    base: TrainConfig

    def jobs(self) -> list[TrainConfig]:
        if not self.lambdas or not self.kappas:
            raise ValueError("sweep plan needs at least one lambda and one kappa")
        return [
            replace(self.base, lmbda=lam, kappa=kap)
            for kap in self.kappas
            for lam in self.lambdas
        ]


@dataclass
class SweepJobResult:
    config: TrainConfig
    status: str  # "ok" or "failed: <reason>"
    checkpoint: Optional[Path]
    bpp: Optional[float] = None
    cer: Optional[float] = None
    wer: Optional[float] = None
    psnr: Optional[float] = None


def job_name(config: TrainConfig) -> str:
    return f"lam{config.lmbda:g}_kap{config.kappa:g}"


def run_sweep(
    plan: SweepPlan,
    train_samples: Sequence[LoadedSample],
    eval_samples: Sequence[LoadedSample],
    recognizer: TextRecognizer,
    model_factory: Callable[[], CompressionModel],
    out_dir: Path,
) -> list[SweepJobResult]:
    """Train and evaluate every job; failures are recorded, not fatal.

    Each job seeds torch, builds a fresh model, trains into its own
    subdirectory, and contributes dataset-mean (bpp, cer, wer, psnr). A
    manifest of job configs and statuses is written alongside.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[SweepJobResult] = []
    for config in plan.jobs():
        job_dir = out_dir / job_name(config)
        try:
            torch.manual_seed(config.seed)
            model = model_factory()
            checkpoint = train(config, train_samples, model, recognizer, job_dir)
            records = evaluate.evaluate_dataset(model, recognizer, eval_samples)
            mean_cer, mean_wer, mean_psnr, mean_bpp = aggregate(records)
            results.append(
                SweepJobResult(
                    config=config,
                    status="ok",
                    checkpoint=checkpoint,
                    bpp=mean_bpp,
                    cer=mean_cer,
                    wer=mean_wer,
                    psnr=mean_psnr,
                )
            )
        except Exception as exc:  # job isolation: record and continue
            results.append(SweepJobResult(config=config, status=f"failed: {exc}", checkpoint=None))
    _write_sweep_manifest(out_dir / "sweep_manifest.txt", results)
    return results


def _write_sweep_manifest(path: Path, results: Sequence[SweepJobResult]) -> None:
    lines = [
        "textcomp-sweep v1",
        "optimizer = adam",
        "weight_decay = 0",
        "lr_schedule = constant",
        f"jobs = {len(results)}",
    ]
    for r in results:
        parts = [
            f"job: name={job_name(r.config)}",
            f"lambda={r.config.lmbda!r}",
            f"kappa={r.config.kappa!r}",
            f"seed={r.config.seed}",
            f"status={r.status}",
        ]
        if r.status == "ok":
            parts.append(f"bpp={r.bpp!r}")
            parts.append(f"cer={r.cer!r}")
            parts.append(f"wer={r.wer!r}")
            parts.append(f"psnr={r.psnr!r}")
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")
