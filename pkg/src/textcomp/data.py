"""Dataset ingestion, manifests, and a synthetic text-image generator.

Ingestion walks a directory of screenshots, builds (or reuses) the region
cache for every image, and applies the training-set retention rule: train
splits drop images with fewer than 5 retained text regions, test splits
keep everything.

The synthetic generator renders words from an embedded 5x7 bitmap font so
desk-scale tests get crisp dark-on-light text with exact box/word ground
truth and zero external font dependencies.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import BBox, RegionCacheEntry, TrainConfig, validate_image
from .textpipe import (
    TextDetector,
    TextRecognizer,
    build_cache,
    has_cache,
    load_cache,
    save_cache,
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# 5x7 glyphs, one string per pixel row, '#' = ink.
GLYPHS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": (".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
}
GLYPH_H = 7
GLYPH_W = 5


def synth_text_image(
    words: list[str],
    size: tuple[int, int] = (64, 256),
    seed: int = 0,
    scale: int = 2,
) -> tuple[np.ndarray, list[tuple[BBox, str]]]:
    """Render words onto a light canvas; returns (image, [(bbox, word), ...]).

    Deterministic for a fixed seed: the seed drives background level, faint
    texture, and per-word ink darkness. Words flow left to right and wrap.
    Word gaps are wide (4*scale) and intra-word character gaps narrow
    (1*scale), so with scale >= 2 the default ink detector merges glyphs
    into words without merging neighboring words. Boxes are the exact ink
    extents. Raises when a word does not fit the canvas or uses characters
    outside the embedded font.
    """
    height, width = size
    rng = np.random.default_rng(seed)
    background = 0.92 + 0.06 * rng.random()
    image = np.full((height, width, 3), background, dtype=np.float64)
    image += rng.uniform(-0.01, 0.01, size=(height, width, 1))

    margin = 2 * scale + 2
    advance = (GLYPH_W + 1) * scale
    word_gap = 4 * scale
    line_height = (GLYPH_H + 3) * scale
    cursor_x, cursor_y = margin, margin
    placed: list[tuple[BBox, str]] = []

    for word in words:
        if not word:
            raise ValueError("cannot render an empty word")
        for ch in word:
            if ch not in GLYPHS:
                raise ValueError(f"character {ch!r} not in the embedded font")
        word_width = len(word) * advance - scale
        if word_width > width - 2 * margin:
            raise ValueError(f"word {word!r} is too wide for a {width}px canvas")
        if cursor_x + word_width > width - margin:
            cursor_x = margin
            cursor_y += line_height
        if cursor_y + GLYPH_H * scale > height - margin:
            raise ValueError(f"words do not fit a {height}x{width} canvas")
        ink = 0.02 + 0.13 * rng.random()
        for k, ch in enumerate(word):
            gx = cursor_x + k * advance
            for row, bits in enumerate(GLYPHS[ch]):
                for col, bit in enumerate(bits):
                    if bit == "#":
                        y = cursor_y + row * scale
                        x = gx + col * scale
                        image[y : y + scale, x : x + scale, :] = ink
        placed.append(
            (BBox(cursor_x, cursor_y, cursor_x + word_width, cursor_y + GLYPH_H * scale), word)
        )
        cursor_x += word_width + word_gap

    return np.clip(image, 0.0, 1.0), placed


def load_image(path: Path) -> np.ndarray:
    """Decode PNG/JPG to an H x W x 3 float array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return validate_image(arr)


def save_image(path: Path, image: np.ndarray) -> None:
    """Write an image as 8-bit PNG/JPG according to the path suffix."""
    arr = validate_image(image)
    as_uint8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(as_uint8).save(path)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    file: str
    retained_count: int


@dataclass
class DatasetManifest:
    """Ingestion result: which images belong to the split, with region counts."""

    root: str
    split: str
    entries: list[ManifestEntry]
    warnings: list[str] = field(default_factory=list)


MANIFEST_MAGIC = "textcomp-manifest v1"
TRAIN_MIN_RETAINED = 5


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    lines = [
        MANIFEST_MAGIC,
        f"root = {manifest.root}",
        f"split = {manifest.split}",
        f"entries = {len(manifest.entries)}",
    ]
    for e in manifest.entries:
        lines.append(f"entry: id={e.image_id} file={e.file} retained={e.retained_count}")
    for w in manifest.warnings:
        lines.append(f"warning: {w}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: not a manifest file")
    header = {}
    entries = []
    warnings = []
    for line in lines[1:]:
        if line.startswith("entry: "):
            fields_ = dict(part.split("=", 1) for part in line[len("entry: "):].split(" "))
            entries.append(
                ManifestEntry(
                    image_id=fields_["id"],
                    file=fields_["file"],
                    retained_count=int(fields_["retained"]),
                )
            )
        elif line.startswith("warning: "):
            warnings.append(line[len("warning: "):])
        elif " = " in line:
            key, _, value = line.partition(" = ")
            header[key] = value
        elif line.strip():
            raise ValueError(f"{path}: unparseable line {line!r}")
    manifest = DatasetManifest(
        root=header.get("root", ""),
        split=header.get("split", ""),
        entries=entries,
        warnings=warnings,
    )
    if int(header.get("entries", len(entries))) != len(entries):
        raise ValueError(f"{path}: entry count mismatch")
    return manifest


def list_images(data_dir: Path) -> list[Path]:
    paths = [
        p
        for p in sorted(Path(data_dir).iterdir())
        if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()
    ]
    stems = [p.stem for p in paths]
    duplicates = {s for s in stems if stems.count(s) > 1}
    if duplicates:
        raise ValueError(f"duplicate image ids in {data_dir}: {sorted(duplicates)}")
    return paths


def ingest(
    data_dir: Path,
    split: str,
    detector: TextDetector,
    recognizer: TextRecognizer,
    cfg: TrainConfig,
    cache_root: Path,
    rebuild: bool = False,
    jobs: int = 1,
) -> DatasetManifest:
    """Build or reuse caches for every image and assemble the split manifest.

    Train splits exclude images with fewer than 5 retained regions; test
    splits keep all. Existing cache entries are reused without touching the
    detector or recognizer unless ``rebuild`` is set. Unreadable images are
    skipped and recorded as warnings. ``jobs`` > 1 fans image processing out
    to a thread pool; results come back in image order, so output is
    byte-identical regardless of worker count.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")

    def process(path: Path):
        image_id = path.stem
        try:
            if not rebuild and has_cache(cache_root, image_id):
                entry = load_cache(cache_root, image_id)
            else:
                image = load_image(path)
                entry = build_cache(image, image_id, detector, recognizer, cfg)
                save_cache(entry, cache_root)
        except (OSError, ValueError) as exc:
            return None, f"skipped {path.name}: {exc}"
        return entry, None

    paths = list_images(data_dir)
    if jobs == 1:
        outcomes = [process(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(process, paths))

    entries = []
    warnings = []
    for path, (entry, warning) in zip(paths, outcomes):
        if warning is not None:
            warnings.append(warning)
            continue
        retained = entry.n_retained
        if split == "train" and retained < TRAIN_MIN_RETAINED:
            continue
        entries.append(
            ManifestEntry(image_id=path.stem, file=path.name, retained_count=retained)
        )
    entries.sort(key=lambda e: e.image_id)
    return DatasetManifest(
        root=str(data_dir), split=split, entries=entries, warnings=warnings
    )


@dataclass
class LoadedSample:
    """One image with its cache entry, ready for training or evaluation."""

    image_id: str
    image: np.ndarray
    cache: RegionCacheEntry


def load_samples(
    manifest: DatasetManifest,
    data_dir: Path,
    cache_root: Path,
    limit: Optional[int] = None,
) -> list[LoadedSample]:
    """Materialize manifest entries as (image, cache) pairs, sorted by id."""
    samples = []
    for e in manifest.entries[: limit if limit is not None else len(manifest.entries)]:
        image = load_image(Path(data_dir) / e.file)
        cache = load_cache(cache_root, e.image_id)
        samples.append(LoadedSample(image_id=e.image_id, image=image, cache=cache))
    return samples
