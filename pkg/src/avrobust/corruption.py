"""Corruption plans and the corruption functions they reference.

A plan names which frames get corrupted and how: audio gets one contiguous
chunk mixed with a noise-bank clip at a fixed SNR; video gets one or more
non-overlapping events (center occlusion, additive Gaussian noise, box blur,
or whole-frame pixelation). Frames outside the plan's index sets pass through
bit-identical. Every event carries enough parameters (clip ids, patch ids,
per-event seeds, offsets) to replay the corruption exactly from a log record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import NOISE_CATEGORIES, NoiseBankSet
from .errors import ConfigError

VISUAL_KINDS = ("occlude", "gauss_noise", "blur", "pixelate", "hands_occlude")
# kinds reserved for evaluation, mirroring the seen/unseen occluder split
UNSEEN_VISUAL_KINDS = ("hands_occlude", "pixelate")
_NOISE_LIKE_KINDS = ("gauss_noise", "blur")

EVAL_SNRS_DB = (-10.0, -5.0, 0.0, 5.0, 10.0)

GAUSS_SIGMA_DEFAULT = 0.1
PIXELATE_BLOCK = 3


@dataclass
class CorruptionConfig:
    visual_ratio_range: tuple[float, float] = (0.1, 0.5)
    audio_ratio_range: tuple[float, float] = (0.3, 0.5)
    snr_db: float = -10.0
    visual_kinds: tuple[str, ...] = ("occlude", "gauss_noise", "blur")
    audio_categories: tuple[str, ...] = ("babble", "speech", "music", "natural")
    visual_frequency: int = 1
    gauss_or_blur_prob: float = 0.3

    def validate(self) -> None:
        for name, (lo, hi) in (
            ("visual_ratio_range", self.visual_ratio_range),
            ("audio_ratio_range", self.audio_ratio_range),
        ):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        if self.visual_frequency < 1:
            raise ConfigError("visual_frequency must be >= 1")
        if not 0.0 <= self.gauss_or_blur_prob <= 1.0:
            raise ConfigError("gauss_or_blur_prob must be in [0, 1]")
        for k in self.visual_kinds:
            if k not in VISUAL_KINDS:
                raise ConfigError(f"unknown visual kind {k!r}")
        for c in self.audio_categories:
            if c not in NOISE_CATEGORIES:
                raise ConfigError(f"unknown audio category {c!r}")


@dataclass
class AudioEvent:
    span: tuple[int, int]        # [start, end)
    category: str
    clip_index: int
    snr_db: float
    clip_offset: int             # start frame within the (tiled) clip


@dataclass
class VideoEvent:
    span: tuple[int, int]
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class CorruptionPlan:
    length: int
    audio_events: list[AudioEvent] = field(default_factory=list)
    video_events: list[VideoEvent] = field(default_factory=list)

    @property
    def c_audio(self) -> np.ndarray:
        return _spans_to_indices(self.length, [e.span for e in self.audio_events])

    @property
    def c_video(self) -> np.ndarray:
        return _spans_to_indices(self.length, [e.span for e in self.video_events])

    def to_record(self) -> dict:
        return {
            "T": self.length,
            "audio_events": [
                {
                    "span": list(e.span),
                    "category": e.category,
                    "clip_index": e.clip_index,
                    "snr_db": e.snr_db,
                    "clip_offset": e.clip_offset,
                }
                for e in self.audio_events
            ],
            "video_events": [
                {"span": list(e.span), "kind": e.kind, "params": e.params}
                for e in self.video_events
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CorruptionPlan":
        return cls(
            length=rec["T"],
            audio_events=[
                AudioEvent(
                    tuple(e["span"]), e["category"], e["clip_index"],
                    e["snr_db"], e["clip_offset"],
                )
                for e in rec["audio_events"]
            ],
            video_events=[
                VideoEvent(tuple(e["span"]), e["kind"], dict(e["params"]))
                for e in rec["video_events"]
            ],
        )


def _spans_to_indices(length: int, spans: list[tuple[int, int]]) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for s, e in spans:
        mask[s:e] = True
    return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# plan sampling


def _split_lengths(total: int, parts: int) -> list[int]:
    parts = min(parts, total)
    if parts == 0:
        return []
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _place_nonoverlapping(
    lengths: list[int], t_total: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    # sorted uniform offsets into the free space keep the spans disjoint:
    # start_i = offset_i + total length of earlier spans
    free = t_total - sum(lengths)
    offsets = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    spans, consumed = [], 0
    for offset, length in zip(offsets, lengths):
        start = int(offset) + consumed
        spans.append((start, start + length))
        consumed += length
    return spans


def _pick_kind(kinds: tuple[str, ...], p_noise: float, rng: np.random.Generator) -> str:
    occluders = [k for k in kinds if k not in _NOISE_LIKE_KINDS]
    noisy = [k for k in kinds if k in _NOISE_LIKE_KINDS]
    if occluders and noisy:
        group = noisy if rng.random() < p_noise else occluders
    else:
        group = occluders or noisy
    return group[int(rng.integers(0, len(group)))]


def sample_plan(
    T: int,
    cfg: CorruptionConfig,
    rng: np.random.Generator,
    banks: NoiseBankSet | None = None,
    bank_split: str = "train",
    patch_bank: "PatchBank | None" = None,
) -> CorruptionPlan:
    """Sample a corruption plan for a sequence of length T.

    Audio: one contiguous chunk covering round(r * T) frames with r uniform in
    cfg.audio_ratio_range. Video: cfg.visual_frequency non-overlapping events
    totalling round(r * T) frames, r uniform in cfg.visual_ratio_range.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    cfg.validate()

    plan = CorruptionPlan(length=T)

    a_lo, a_hi = cfg.audio_ratio_range
    audio_len = int(round(rng.uniform(a_lo, a_hi) * T))
    if audio_len > 0:
        if not cfg.audio_categories:
            raise ConfigError("audio_ratio_range is nonzero but audio_categories is empty")
        start = int(rng.integers(0, T - audio_len + 1))
        category = cfg.audio_categories[int(rng.integers(0, len(cfg.audio_categories)))]
        n_clips = len(banks.bank(category, bank_split).clips) if banks is not None else 1
        clip_index = int(rng.integers(0, n_clips))
        if banks is not None:
            clip_len = banks.clip(category, bank_split, clip_index).shape[0]
            max_off = max(1, clip_len - audio_len + 1) if clip_len >= audio_len else 1
            clip_offset = int(rng.integers(0, max_off))
        else:
            clip_offset = 0
        plan.audio_events.append(
            AudioEvent((start, start + audio_len), category, clip_index, cfg.snr_db, clip_offset)
        )

    v_lo, v_hi = cfg.visual_ratio_range
    video_len = int(round(rng.uniform(v_lo, v_hi) * T))
    if video_len > 0:
        if not cfg.visual_kinds:
            raise ConfigError("visual_ratio_range is nonzero but visual_kinds is empty")
        lengths = _split_lengths(video_len, cfg.visual_frequency)
        spans = _place_nonoverlapping(lengths, T, rng)
        for span in spans:
            kind = _pick_kind(cfg.visual_kinds, cfg.gauss_or_blur_prob, rng)
            params: dict = {}
            if kind in ("occlude", "hands_occlude"):
                n_patches = patch_bank.pool_size(kind) if patch_bank is not None else 8
                params["patch_index"] = int(rng.integers(0, n_patches))
            elif kind == "gauss_noise":
                params["sigma"] = GAUSS_SIGMA_DEFAULT
                params["seed"] = int(rng.integers(0, 2**31 - 1))
            elif kind == "pixelate":
                params["block"] = PIXELATE_BLOCK
            plan.video_events.append(VideoEvent(span, kind, params))

    return plan


# ---------------------------------------------------------------------------
# audio corruption


def mix_noise_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Mix noise into signal so the result holds the requested SNR in dB.

    The scale is alpha = sqrt(P_signal / (P_noise * 10^(snr_db / 10))) with
    powers taken as the mean square over the whole array.
    """
    if signal.shape != noise.shape:
        raise ValueError(f"shape mismatch: {signal.shape} vs {noise.shape}")
    p_signal = float(np.mean(np.square(signal, dtype=np.float64)))
    p_noise = float(np.mean(np.square(noise, dtype=np.float64)))
    if p_noise <= 0.0:
        raise ArithmeticError("noise power is zero on the corrupted span")
    if p_signal <= 0.0:
        raise ArithmeticError("signal power is zero; SNR is undefined")
    alpha = math.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return (signal.astype(np.float64) + alpha * noise.astype(np.float64)).astype(signal.dtype)


def _event_noise(event: AudioEvent, banks: NoiseBankSet, bank_split: str) -> np.ndarray:
    start, end = event.span
    span_len = end - start
    clip = banks.clip(event.category, bank_split, event.clip_index)
    if clip.shape[0] < event.clip_offset + span_len:
        reps = int(np.ceil((event.clip_offset + span_len) / clip.shape[0]))
        clip = np.tile(clip, (reps, 1))
    return clip[event.clip_offset : event.clip_offset + span_len]


def apply_audio(
    audio: np.ndarray, plan: CorruptionPlan, banks: NoiseBankSet, bank_split: str = "train"
) -> np.ndarray:
    """Apply the plan's audio events; frames outside them are bit-identical."""
    if audio.shape[0] != plan.length:
        raise ValueError(f"audio length {audio.shape[0]} != plan length {plan.length}")
    out = audio.copy()
    for event in plan.audio_events:
        start, end = event.span
        noise = _event_noise(event, banks, bank_split)
        out[start:end] = mix_noise_at_snr(audio[start:end], noise, event.snr_db)
    return out


# ---------------------------------------------------------------------------
# video corruption


class PatchBank:
    """Synthetic occluder patches: an object-like train pool and a hand-like
    test pool, regenerated deterministically from a seed."""

    def __init__(self, frame_hw: tuple[int, int], seed: int, pool_count: int = 8):
        self.frame_hw = frame_hw
        self.seed = seed
        h, w = frame_hw
        self._patches = {
            "occlude": [
                self._object_patch(h // 2, w // 2, seed, i) for i in range(pool_count)
            ],
            "hands_occlude": [
                self._hand_patch(h * 5 // 8, w * 5 // 8, seed, i) for i in range(pool_count)
            ],
        }

    @staticmethod
    def _object_patch(h: int, w: int, seed: int, index: int) -> np.ndarray:
        rng = np.random.default_rng([seed, 101, index])
        yy, xx = np.mgrid[0:h, 0:w]
        angle = rng.uniform(0, np.pi)
        period = rng.integers(2, 5)
        stripes = (((yy * np.cos(angle) + xx * np.sin(angle)) // period) % 2).astype(float)
        lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
        return (lo + (hi - lo) * stripes).astype(np.float32)

    @staticmethod
    def _hand_patch(h: int, w: int, seed: int, index: int) -> np.ndarray:
        rng = np.random.default_rng([seed, 102, index])
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        r2 = ((yy - cy) / (0.6 * h)) ** 2 + ((xx - cx) / (0.6 * w)) ** 2
        tone = rng.uniform(0.55, 0.75)
        blob = tone - 0.2 * np.clip(r2, 0, 1) + 0.03 * rng.standard_normal((h, w))
        return np.clip(blob, 0.0, 1.0).astype(np.float32)

    def pool_size(self, kind: str) -> int:
        return len(self._patches[kind])

    def patch(self, kind: str, index: int) -> np.ndarray:
        pool = self._patches.get(kind)
        if pool is None:
            raise ConfigError(f"no patch pool for kind {kind!r}")
        if not 0 <= index < len(pool):
            raise KeyError(f"patch {index} out of range for {kind}")
        return pool[index]


def _paste_center(frames: np.ndarray, patch: np.ndarray) -> np.ndarray:
    _, h, w = frames.shape
    ph, pw = patch.shape
    top, left = (h - ph) // 2, (w - pw) // 2
    out = frames.copy()
    out[:, top : top + ph, left : left + pw] = patch
    return out


def _box_blur(frames: np.ndarray) -> np.ndarray:
    # 3x3 box filter with edge replication
    padded = np.pad(frames, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(frames)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + frames.shape[1], dx : dx + frames.shape[2]]
    return out / 9.0


def _pixelate(frames: np.ndarray, block: int) -> np.ndarray:
    out = frames.copy()
    _, h, w = frames.shape
    for by in range(0, h, block):
        for bx in range(0, w, block):
            tile = frames[:, by : by + block, bx : bx + block]
            out[:, by : by + block, bx : bx + block] = tile.mean(axis=(1, 2), keepdims=True)
    return out


def apply_video(
    video: np.ndarray, plan: CorruptionPlan, patch_bank: PatchBank | None = None
) -> np.ndarray:
    """Apply the plan's video events; frames outside them are bit-identical.

    Corrupted frames stay within [0, 1].
    """
    if video.shape[0] != plan.length:
        raise ValueError(f"video length {video.shape[0]} != plan length {plan.length}")
    out = video.copy()
    for event in plan.video_events:
        start, end = event.span
        frames = video[start:end]
        if event.kind in ("occlude", "hands_occlude"):
            if patch_bank is None:
                raise ConfigError(f"{event.kind} requested but no patch bank given")
            patch = patch_bank.patch(event.kind, event.params["patch_index"])
            corrupted = _paste_center(frames, patch)
        elif event.kind == "gauss_noise":
            rng = np.random.default_rng(event.params["seed"])
            noise = rng.normal(0.0, event.params.get("sigma", GAUSS_SIGMA_DEFAULT), frames.shape)
            corrupted = np.clip(frames + noise, 0.0, 1.0).astype(video.dtype)
        elif event.kind == "blur":
            corrupted = _box_blur(frames).astype(video.dtype)
        elif event.kind == "pixelate":
            corrupted = _pixelate(frames, event.params.get("block", PIXELATE_BLOCK))
        else:
            raise ConfigError(f"unknown visual corruption kind {event.kind!r}")
        out[start:end] = corrupted
    return out
