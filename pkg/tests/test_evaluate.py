import numpy as np
import pytest
import torch

from textcomp import (
    BBox,
    IdentityCodec,
    RegionCacheEntry,
    RegionRecord,
    StubRecognizer,
    TinyHyperprior,
    evaluate_dataset,
    evaluate_image,
    rd_points,
)
from textcomp.data import LoadedSample


class TestEvaluateImage:
    def test_identity_codec_is_perfect(self, corpus_samples, recognizer):
        record = evaluate_image(IdentityCodec(), recognizer, corpus_samples[0])
        assert record.cer == 0.0
        assert record.wer == 0.0
        assert record.psnr == 99.0
        assert record.bpp == 0.0

    def test_zero_region_image_has_none_text_metrics(self, recognizer):
        image = np.full((32, 64, 3), 0.9)
        cache = RegionCacheEntry(image_id="blank", source_shape=(32, 64), records=[])
        sample = LoadedSample(image_id="blank", image=image, cache=cache)
        record = evaluate_image(IdentityCodec(), recognizer, sample)
        assert record.cer is None
        assert record.wer is None
        assert record.psnr == 99.0

    def test_empty_reference_regions_are_skipped(self):
        # cached logits whose argmax at the first position is <eos> decode to
        # an empty reference, which cannot be scored
        rec = StubRecognizer(seed=0)
        image = np.full((32, 64, 3), 0.9)
        s = len(rec.charset)
        logits = np.full((rec.max_len, s), 14.0, dtype=np.float32)
        logits[:, 0] = 16.0  # eos wins everywhere
        cache = RegionCacheEntry(
            image_id="empty",
            source_shape=(32, 64),
            records=[RegionRecord(BBox(0, 0, 16, 16), logits, True)],
        )
        sample = LoadedSample(image_id="empty", image=image, cache=cache)
        record = evaluate_image(IdentityCodec(), rec, sample)
        assert record.cer is None
        assert record.wer is None

    def test_untrained_codec_imperfect_but_valid(self, corpus_samples, recognizer):
        torch.manual_seed(0)
        model = TinyHyperprior()
        record = evaluate_image(model, recognizer, corpus_samples[0])
        assert record.bpp > 0.0
        assert record.psnr < 99.0
        assert record.wer is None or record.wer <= 1.0

    def test_training_mode_restored(self, corpus_samples, recognizer):
        torch.manual_seed(0)
        model = TinyHyperprior().train()
        evaluate_image(model, recognizer, corpus_samples[0])
        assert model.training

    def test_eval_mode_deterministic(self, corpus_samples, recognizer):
        torch.manual_seed(0)
        model = TinyHyperprior()
        a = evaluate_image(model, recognizer, corpus_samples[0])
        b = evaluate_image(model, recognizer, corpus_samples[0])
        assert a == b


class TestEvaluateDataset:
    def test_sorted_by_image_id(self, corpus_samples, recognizer):
        records = evaluate_dataset(IdentityCodec(), recognizer, corpus_samples[::-1])
        ids = [r.image_id for r in records]
        assert ids == sorted(ids)

    def test_jobs_do_not_change_records(self, corpus_samples, recognizer):
        torch.manual_seed(0)
        model = TinyHyperprior()
        serial = evaluate_dataset(model, recognizer, corpus_samples, jobs=1)
        parallel = evaluate_dataset(model, recognizer, corpus_samples, jobs=3)
        assert serial == parallel


class TestRdPoints:
    def test_zero_rate_yields_no_points(self, corpus_samples, recognizer):
        records = evaluate_dataset(IdentityCodec(), recognizer, corpus_samples)
        points = rd_points(records)
        assert points["cer"] is None
        assert points["wer"] is None
        assert points["psnr"] is None

    def test_positive_rate_yields_points(self, corpus_samples, recognizer):
        torch.manual_seed(0)
        model = TinyHyperprior()
        records = evaluate_dataset(model, recognizer, corpus_samples)
        points = rd_points(records)
        assert points["cer"] is not None
        assert points["cer"].bpp > 0
        assert points["psnr"].value < 99.0
