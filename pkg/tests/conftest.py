"""Shared fixtures: synthetic corpora, small configs, seeded components."""

from pathlib import Path

import numpy as np
import pytest
import torch

from textcomp import (
    InkTextDetector,
    StubRecognizer,
    TrainConfig,
    ingest,
    load_samples,
    save_image,
    synth_text_image,
)

WORDSETS = [
    ["HELLO", "WORLD", "ABC", "DEF", "GHI"],
    ["FOO", "BAR", "BAZ", "QUX", "QUUX"],
    ["ONE", "TWO", "SIX", "TEN", "ZERO"],
    ["CAT", "DOG", "EMU", "FOX", "OWL"],
]


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """Four 64x256 synthetic pages, five words each."""
    root = tmp_path_factory.mktemp("corpus")
    for i, words in enumerate(WORDSETS):
        image, _ = synth_text_image(words, size=(64, 256), seed=i)
        save_image(root / f"img{i}.png", image)
    return root


@pytest.fixture(scope="session")
def recognizer() -> StubRecognizer:
    return StubRecognizer(seed=0)


@pytest.fixture(scope="session")
def small_cfg() -> TrainConfig:
    return TrainConfig(lmbda=0.01, kappa=0.1, batch_size=2, epochs=1, seed=0)


@pytest.fixture(scope="session")
def corpus_cache(tmp_path_factory, corpus_dir, recognizer, small_cfg) -> Path:
    """Region caches for the whole corpus, built once per session."""
    cache = tmp_path_factory.mktemp("cache")
    ingest(corpus_dir, "train", InkTextDetector(), recognizer, small_cfg, cache)
    return cache


@pytest.fixture(scope="session")
def corpus_samples(corpus_dir, corpus_cache, recognizer, small_cfg):
    manifest = ingest(
        corpus_dir, "train", InkTextDetector(), recognizer, small_cfg, corpus_cache
    )
    return load_samples(manifest, corpus_dir, corpus_cache)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def fixed_torch_seed():
    torch.manual_seed(0)
