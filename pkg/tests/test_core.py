import numpy as np
import pytest

from textcomp import (
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


class TestValidateImage:
    def test_accepts_hwc3_in_unit_range(self):
        img = np.zeros((4, 6, 3))
        out = validate_image(img)
        assert out.shape == (4, 6, 3)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            validate_image(np.zeros((4, 6)))

    def test_rejects_wrong_channels(self):
        with pytest.raises(ValueError):
            validate_image(np.zeros((4, 6, 4)))

    def test_rejects_out_of_range(self):
        img = np.zeros((2, 2, 3))
        img[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            validate_image(img)

    def test_rejects_nan(self):
        img = np.zeros((2, 2, 3))
        img[1, 1, 2] = np.nan
        with pytest.raises(ValueError):
            validate_image(img)


class TestClampImage:
    def test_clamps_overshoot(self):
        img = np.array([[[1.2, -0.3, 0.5]]])
        out = clamp_image(img)
        assert out.tolist() == [[[1.0, 0.0, 0.5]]]

    def test_nonfinite_means_divergence(self):
        img = np.full((1, 1, 3), np.inf)
        with pytest.raises(ValueError, match="diverged"):
            clamp_image(img)


class TestValidateLogits:
    def test_casts_to_float32(self):
        v = validate_logits(np.ones((2, 3), dtype=np.float64))
        assert v.dtype == np.float32

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            validate_logits(np.ones((2, 1)))

    def test_rejects_empty_positions(self):
        with pytest.raises(ValueError):
            validate_logits(np.ones((0, 3)))

    def test_rejects_nonfinite(self):
        v = np.ones((2, 3))
        v[0, 0] = np.nan
        with pytest.raises(ValueError):
            validate_logits(v)


class TestBBox:
    def test_dimensions(self):
        b = BBox(2, 3, 10, 8)
        assert (b.width, b.height) == (8, 5)

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            BBox(5, 0, 5, 4)

    def test_rejects_negative_origin(self):
        with pytest.raises(ValueError):
            BBox(-1, 0, 4, 4)

    def test_dict_round_trip(self):
        b = BBox(1, 2, 3, 4)
        assert BBox.from_dict(b.to_dict()) == b

    def test_validate_bbox_bounds(self):
        assert validate_bbox(BBox(0, 0, 8, 4), (4, 8))
        assert not validate_bbox(BBox(0, 0, 9, 4), (4, 8))
        assert not validate_bbox(BBox(0, 0, 8, 5), (4, 8))


class TestRegionCacheEntry:
    def _entry(self, retained=(True, False)):
        records = [
            RegionRecord(BBox(0, 0, 4, 4), np.ones((2, 3), dtype=np.float32), r)
            for r in retained
        ]
        return RegionCacheEntry(image_id="x", source_shape=(8, 8), records=records)

    def test_retained_count(self):
        e = self._entry((True, False))
        assert e.n_retained == 1
        assert len(e.retained_records()) == 1

    def test_rejects_box_outside_image(self):
        records = [RegionRecord(BBox(0, 0, 16, 4), np.ones((2, 3), np.float32), True)]
        with pytest.raises(ValueError):
            RegionCacheEntry(image_id="x", source_shape=(8, 8), records=records)

    def test_record_equality_uses_logit_values(self):
        a = RegionRecord(BBox(0, 0, 4, 4), np.ones((2, 3), np.float32), True)
        b = RegionRecord(BBox(0, 0, 4, 4), np.ones((2, 3), np.float32), True)
        c = RegionRecord(BBox(0, 0, 4, 4), np.zeros((2, 3), np.float32), True)
        assert a == b and a != c


class TestRDCurve:
    def test_sorts_by_bpp(self):
        c = RDCurve("a", "cer", [RDPoint(0.4, 0.1), RDPoint(0.2, 0.3)])
        assert c.bpps.tolist() == [0.2, 0.4]
        assert c.values.tolist() == [0.3, 0.1]

    def test_rejects_duplicate_bpp(self):
        with pytest.raises(ValueError):
            RDCurve("a", "cer", [RDPoint(0.2, 0.1), RDPoint(0.2, 0.3)])

    def test_rejects_unknown_metric_kind(self):
        with pytest.raises(ValueError):
            RDCurve("a", "ssim", [RDPoint(0.2, 0.1)])

    def test_rdpoint_requires_positive_bpp(self):
        with pytest.raises(ValueError):
            RDPoint(0.0, 0.1)


class TestEvalRecord:
    def test_none_text_metrics_allowed(self):
        r = EvalRecord(image_id="a", bpp=0.5, cer=None, wer=None, psnr=30.0)
        assert r.cer is None and r.wer is None

    def test_wer_must_not_exceed_one(self):
        with pytest.raises(ValueError):
            EvalRecord(image_id="a", bpp=0.5, cer=0.1, wer=1.5, psnr=30.0)

    def test_cer_may_exceed_one(self):
        r = EvalRecord(image_id="a", bpp=0.5, cer=1.8, wer=1.0, psnr=30.0)
        assert r.cer == 1.8

    def test_dict_round_trip(self):
        r = EvalRecord(image_id="a", bpp=0.5, cer=None, wer=0.25, psnr=30.0)
        assert EvalRecord.from_dict(r.to_dict()) == r


class TestTrainConfig:
    def test_defaults_match_reference_settings(self):
        cfg = TrainConfig(lmbda=0.01)
        assert cfg.kappa == 0.1
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 8
        assert cfg.epochs == 20
        assert cfg.m_min == 14.2
        assert cfg.sigma_max == 2.0
        assert cfg.seed == 0

    def test_lmbda_required_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(lmbda=0.0)

    def test_kappa_zero_allowed(self):
        assert TrainConfig(lmbda=0.01, kappa=0.0).kappa == 0.0

    def test_kappa_negative_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lmbda=0.01, kappa=-0.1)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"lmbda": 0.01, "bogus": 1})

    def test_dict_round_trip(self):
        cfg = TrainConfig(lmbda=0.01, kappa=0.0, max_steps=7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_infinite_m_min_allowed(self):
        assert TrainConfig(lmbda=1.0, m_min=float("inf")).m_min == float("inf")
