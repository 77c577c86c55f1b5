"""Masked-frame plans, kept disjoint from corruption plans.

Masking is sampled after corruption: fixed-length segments are dropped at
uniform starts, overlapping segments merge, and any proposed frame that is
already corrupted in the same modality is discarded rather than relocated.
The segment count is prob * T / (2 * segment_len), calibrated so the default
configuration reproduces the intended effective ratios (about 0.2 for audio
and 0.1 for video) once corruption collisions are removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corruption import CorruptionPlan
from .errors import ConfigError


@dataclass
class MaskConfig:
    audio_mask_prob: float = 0.8
    video_mask_prob: float = 0.3
    audio_segment_len: int = 10
    video_segment_len: int = 5

    def validate(self) -> None:
        for name, p in (("audio_mask_prob", self.audio_mask_prob),
                        ("video_mask_prob", self.video_mask_prob)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.audio_segment_len < 1 or self.video_segment_len < 1:
            raise ConfigError("segment lengths must be >= 1")


@dataclass
class MaskPlan:
    m_audio: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    m_video: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_record(self) -> dict:
        return {"m_audio": self.m_audio.tolist(), "m_video": self.m_video.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "MaskPlan":
        return cls(
            m_audio=np.asarray(rec["m_audio"], dtype=np.int64),
            m_video=np.asarray(rec["m_video"], dtype=np.int64),
        )


def _sample_segments(
    T: int, prob: float, seg_len: int, blocked: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    n_segments = int(round(prob * T / (2.0 * seg_len)))
    covered = np.zeros(T, dtype=bool)
    for _ in range(n_segments):
        start = int(rng.integers(0, T))
        covered[start : start + seg_len] = True
    covered[blocked] = False
    return np.flatnonzero(covered)


def sample_mask_plan(
    T: int, cfg: MaskConfig, plan: CorruptionPlan, rng: np.random.Generator
) -> MaskPlan:
    """Sample masked index sets disjoint from the corruption plan."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    cfg.validate()
    return MaskPlan(
        m_audio=_sample_segments(T, cfg.audio_mask_prob, cfg.audio_segment_len,
                                 plan.c_audio, rng),
        m_video=_sample_segments(T, cfg.video_mask_prob, cfg.video_segment_len,
                                 plan.c_video, rng),
    )


def effective_ratios(mask: MaskPlan, T: int) -> tuple[float, float]:
    """Fraction of frames actually masked per modality: (|M_a|/T, |M_v|/T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return len(mask.m_audio) / T, len(mask.m_video) / T
