import numpy as np
import pytest

from avrobust.corruption import CorruptionConfig, CorruptionPlan, sample_plan
from avrobust.masking import MaskConfig, MaskPlan, effective_ratios, sample_mask_plan


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestSampleMaskPlan:
    def test_zero_probs_empty(self):
        cfg = MaskConfig(audio_mask_prob=0.0, video_mask_prob=0.0)
        plan = sample_mask_plan(100, cfg, CorruptionPlan(length=100), _rng())
        assert plan.m_audio.size == 0 and plan.m_video.size == 0

    def test_full_corruption_forces_empty_mask(self):
        from avrobust.corruption import AudioEvent, VideoEvent

        corr = CorruptionPlan(length=50)
        corr.audio_events.append(AudioEvent((0, 50), "babble", 0, -10.0, 0))
        corr.video_events.append(VideoEvent((0, 50), "blur", {}))
        cfg = MaskConfig(audio_mask_prob=1.0, video_mask_prob=1.0)
        plan = sample_mask_plan(50, cfg, corr, _rng(4))
        assert plan.m_audio.size == 0 and plan.m_video.size == 0

    def test_disjoint_from_corruption(self, small_corpus):
        corr_cfg = CorruptionConfig()
        mask_cfg = MaskConfig()
        rng = _rng(9)
        for _ in range(300):
            T = int(rng.integers(10, 120))
            corr = sample_plan(T, corr_cfg, rng, patch_bank=small_corpus["patch_bank"])
            mask = sample_mask_plan(T, mask_cfg, corr, rng)
            c_union = np.union1d(corr.c_audio, corr.c_video)
            m_union = np.union1d(mask.m_audio, mask.m_video)
            assert np.intersect1d(mask.m_audio, corr.c_audio).size == 0
            assert np.intersect1d(mask.m_video, corr.c_video).size == 0
            if m_union.size:
                assert m_union.max() < T
            del c_union

    def test_effective_ratios_match_defaults(self):
        # defaults plus the standard corruption ratios give mean effective
        # ratios near 0.2 (audio) and 0.1 (video)
        corr_cfg = _strip_occluders(
            CorruptionConfig(visual_ratio_range=(0.1, 0.5), audio_ratio_range=(0.3, 0.5))
        )
        mask_cfg = MaskConfig()
        rng = _rng(31)
        ratios = []
        for _ in range(1000):
            corr = sample_plan(100, corr_cfg, rng)
            mask = sample_mask_plan(100, mask_cfg, corr, rng)
            ratios.append(effective_ratios(mask, 100))
        audio_mean = float(np.mean([r[0] for r in ratios]))
        video_mean = float(np.mean([r[1] for r in ratios]))
        assert abs(audio_mean - 0.2) < 0.05
        assert abs(video_mean - 0.1) < 0.05

    def test_determinism(self):
        corr = sample_plan(90, CorruptionConfig(), _rng(2))
        a = sample_mask_plan(90, MaskConfig(), corr, _rng(3)).to_record()
        b = sample_mask_plan(90, MaskConfig(), corr, _rng(3)).to_record()
        assert a == b


def _strip_occluders(cfg: CorruptionConfig) -> CorruptionConfig:
    # keep plan sampling patch-bank-free for pure index statistics
    from dataclasses import replace

    return replace(cfg, visual_kinds=("gauss_noise", "blur"))


class TestEffectiveRatios:
    def test_empty(self):
        assert effective_ratios(MaskPlan(), 10) == (0.0, 0.0)

    def test_definition(self):
        plan = MaskPlan(
            m_audio=np.arange(0, 25, dtype=np.int64),
            m_video=np.arange(50, 60, dtype=np.int64),
        )
        assert effective_ratios(plan, 100) == (0.25, 0.10)

    def test_matches_recount(self):
        rng = _rng(12)
        corr = sample_plan(64, CorruptionConfig(visual_kinds=("blur",)), rng)
        mask = sample_mask_plan(64, MaskConfig(), corr, rng)
        ra, rv = effective_ratios(mask, 64)
        assert ra == len(set(mask.m_audio.tolist())) / 64
        assert rv == len(set(mask.m_video.tolist())) / 64

    def test_t_zero_rejected(self):
        with pytest.raises(ValueError):
            effective_ratios(MaskPlan(), 0)
