"""Synthetic paired audio-visual corpus and noise banks.

Each utterance is a sequence of vocabulary symbols. A symbol renders a fixed
audio prototype row (d_a dims) and a fixed grayscale video prototype frame for
its duration, plus per-frame Gaussian jitter, so the two modalities carry the
same transcript and stay learnable cross-modally. Video prototypes share a
common "face" background and differ mostly in a fine-grained central "mouth"
patch, so center occlusion and pixelation genuinely remove information.

Persistence format: one JSON-lines manifest, and per sequence two flat
little-endian float32 binaries (`<stem>.audio.bin`, `<stem>.video.bin`) each
with a JSON sidecar recording shape/dtype/order. Round-trips are bit-exact.

All randomness is drawn from numpy Generators keyed by (seed, stream, index),
so regeneration under the same seed is bit-identical and per-sequence work is
parallelizable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, DependencyError, GenerationError

SPLITS = ("train", "valid", "test")

AUDIO_FPS = 25  # frame-rate semantics of the audio feature track

SEEN_NOISE_CATEGORIES = ("babble", "speech", "music", "natural")
UNSEEN_NOISE_CATEGORIES = ("unseen_park", "unseen_cafe", "unseen_metro", "unseen_river")
NOISE_CATEGORIES = SEEN_NOISE_CATEGORIES + UNSEEN_NOISE_CATEGORIES

# RNG stream tags (second entry of the seed sequence)
_STREAM_PROTO = 0
_STREAM_SPLIT = {"train": 1, "valid": 2, "test": 3}
_STREAM_HELDOUT = 4
_STREAM_BANKS = 5


@dataclass
class SynthSpec:
    """Parameters of the synthetic corpus generator."""

    vocab_size: int = 16
    symbol_duration_range: tuple[int, int] = (4, 8)
    d_a: int = 26
    video_size: tuple[int, int] = (16, 16)
    jitter_std: float = 0.1
    symbols_per_sequence: tuple[int, int] = (3, 8)
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        lo, hi = self.symbol_duration_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad symbol_duration_range {self.symbol_duration_range}")
        slo, shi = self.symbols_per_sequence
        if not (1 <= slo <= shi):
            raise ConfigError(f"bad symbols_per_sequence {self.symbols_per_sequence}")
        if self.jitter_std < 0:
            raise ConfigError("jitter_std must be >= 0")
        if self.d_a < 1 or min(self.video_size) < 2:
            raise ConfigError("d_a and video_size must be positive")


@dataclass
class PairedSequence:
    """One utterance: aligned audio track, video track and transcript."""

    id: str
    audio: np.ndarray       # (T, d_a) float32
    video: np.ndarray       # (T, H, W) float32 in [0, 1]
    transcript: list[int]
    split: str

    @property
    def length(self) -> int:
        return self.audio.shape[0]

    def validate(self) -> None:
        if self.audio.ndim != 2 or self.video.ndim != 3:
            raise DataFormatError(f"{self.id}: bad tensor ranks")
        if self.audio.shape[0] != self.video.shape[0]:
            raise DataFormatError(f"{self.id}: audio/video length mismatch")
        if self.audio.shape[0] < 1:
            raise DataFormatError(f"{self.id}: empty sequence")
        if not self.transcript:
            raise DataFormatError(f"{self.id}: empty transcript")
        if self.video.min() < 0.0 or self.video.max() > 1.0:
            raise DataFormatError(f"{self.id}: video values outside [0, 1]")


@dataclass
class ManifestEntry:
    id: str
    path: str               # stem relative to the manifest directory
    length: int
    split: str
    transcript: list[int]


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: str               # directory holding the manifest
    format_version: int = 1

    def __post_init__(self):
        self._by_id = {e.id: e for e in self.entries}
        if len(self._by_id) != len(self.entries):
            raise DataFormatError("duplicate ids in manifest")

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def entry(self, seq_id: str) -> ManifestEntry:
        try:
            return self._by_id[seq_id]
        except KeyError:
            raise KeyError(f"unknown sequence id: {seq_id!r}") from None


# ---------------------------------------------------------------------------
# tensor files: flat little-endian float32 + JSON sidecar


def write_tensor(path_stem: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path_stem + ".bin", "wb") as f:
        f.write(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "order": "row-major"}
    with open(path_stem + ".json", "w") as f:
        json.dump(sidecar, f)


def read_tensor(path_stem: str) -> np.ndarray:
    try:
        with open(path_stem + ".json") as f:
            sidecar = json.load(f)
    except FileNotFoundError:
        raise DependencyError(f"missing tensor sidecar: {path_stem}.json") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"corrupt sidecar {path_stem}.json: {exc}") from None
    shape = tuple(sidecar["shape"])
    expected = int(np.prod(shape)) * 4
    try:
        with open(path_stem + ".bin", "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DependencyError(f"missing tensor file: {path_stem}.bin") from None
    if len(raw) != expected:
        raise DataFormatError(
            f"corrupt tensor file {path_stem}.bin: got {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


# ---------------------------------------------------------------------------
# prototypes


def _center_slices(h: int, w: int) -> tuple[slice, slice]:
    return slice(h // 4, h // 4 + h // 2), slice(w // 4, w // 4 + w // 2)


def symbol_prototypes(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-corpus audio and video symbol prototypes.

    Returns (mu_audio (V, d_a), mu_video (V, H, W)). Derived only from
    spec.seed so any stage can rebuild them.
    """
    rng = np.random.default_rng([spec.seed, _STREAM_PROTO])
    v = spec.vocab_size
    h, w = spec.video_size
    mu_a = rng.normal(0.0, 1.0, size=(v, spec.d_a))

    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
    face = 0.5 + 0.25 * np.cos(np.pi * np.minimum(r / (0.5 * max(h, w)), 1.0))

    cs_h, cs_w = _center_slices(h, w)
    mu_v = np.repeat(face[None], v, axis=0)
    # symbol identity: high-frequency center pattern, faint smooth border cue
    center = rng.uniform(-0.35, 0.35, size=(v, cs_h.stop - cs_h.start, cs_w.stop - cs_w.start))
    border = rng.normal(0.0, 0.05, size=(v, 2, 2))
    for s in range(v):
        mu_v[s, cs_h, cs_w] += center[s]
        ramp = np.kron(border[s], np.ones((h // 2, w // 2)))[:h, :w]
        mu_v[s] += ramp
    mu_v = np.clip(mu_v, 0.02, 0.98)
    return mu_a, mu_v


def _render_sequence(
    spec: SynthSpec,
    mu_a: np.ndarray,
    mu_v: np.ndarray,
    seq_id: str,
    split: str,
    rng: np.random.Generator,
) -> PairedSequence:
    slo, shi = spec.symbols_per_sequence
    dlo, dhi = spec.symbol_duration_range
    n_sym = int(rng.integers(slo, shi + 1))
    symbols = rng.integers(0, spec.vocab_size, size=n_sym)
    durations = rng.integers(dlo, dhi + 1, size=n_sym)
    t_total = int(durations.sum())

    frame_sym = np.repeat(symbols, durations)
    audio = mu_a[frame_sym] + spec.jitter_std * rng.standard_normal((t_total, spec.d_a))
    video = mu_v[frame_sym] + spec.jitter_std * rng.standard_normal(
        (t_total,) + tuple(spec.video_size)
    )
    video = np.clip(video, 0.0, 1.0)
    return PairedSequence(
        id=seq_id,
        audio=audio.astype(np.float32),
        video=video.astype(np.float32),
        transcript=[int(s) for s in symbols],
        split=split,
    )


# ---------------------------------------------------------------------------
# corpus generation and loading


def generate_corpus(
    spec: SynthSpec, n_train: int, n_valid: int, n_test: int, out_dir: str
) -> Manifest:
    """Generate and persist a paired corpus; returns its manifest.

    Deterministic given spec.seed: every sequence draws from its own RNG
    stream keyed by (seed, split, index).
    """
    spec.validate()
    if min(n_train, n_valid, n_test) < 1:
        raise ConfigError("sequence counts must all be >= 1")
    os.makedirs(os.path.join(out_dir, "seqs"), exist_ok=True)
    mu_a, mu_v = symbol_prototypes(spec)

    entries = []
    for split, count in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        for i in range(count):
            seq_id = f"{split}-{i:04d}"
            rng = np.random.default_rng([spec.seed, _STREAM_SPLIT[split], i])
            seq = _render_sequence(spec, mu_a, mu_v, seq_id, split, rng)
            stem = os.path.join("seqs", seq_id)
            write_tensor(os.path.join(out_dir, stem + ".audio"), seq.audio)
            write_tensor(os.path.join(out_dir, stem + ".video"), seq.video)
            entries.append(
                ManifestEntry(seq_id, stem, seq.length, split, seq.transcript)
            )

    manifest = Manifest(entries=entries, root=out_dir)
    save_manifest(manifest)
    return manifest


def save_manifest(manifest: Manifest) -> None:
    path = os.path.join(manifest.root, "manifest.jsonl")
    with open(path, "w") as f:
        f.write(json.dumps({"format_version": manifest.format_version}) + "\n")
        for e in manifest.entries:
            f.write(
                json.dumps(
                    {
                        "id": e.id,
                        "path": e.path,
                        "T": e.length,
                        "split": e.split,
                        "transcript": e.transcript,
                    }
                )
                + "\n"
            )


def load_manifest(path_or_dir: str) -> Manifest:
    path = path_or_dir
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.jsonl")
    if not os.path.exists(path):
        raise DependencyError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    version = 1
    with open(path) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{line_no + 1}: {exc}") from None
            if "format_version" in rec and "id" not in rec:
                version = rec["format_version"]
                continue
            entries.append(
                ManifestEntry(
                    rec["id"], rec["path"], rec["T"], rec["split"], rec["transcript"]
                )
            )
    return Manifest(entries=entries, root=root, format_version=version)


def load_sequence(manifest: Manifest, seq_id: str) -> PairedSequence:
    """Load one sequence; bit-exact inverse of what generate_corpus wrote."""
    entry = manifest.entry(seq_id)
    stem = os.path.join(manifest.root, entry.path)
    audio = read_tensor(stem + ".audio")
    video = read_tensor(stem + ".video")
    seq = PairedSequence(
        id=entry.id,
        audio=audio,
        video=video,
        transcript=list(entry.transcript),
        split=entry.split,
    )
    seq.validate()
    if seq.length != entry.length:
        raise DataFormatError(f"{seq_id}: manifest length {entry.length} != file {seq.length}")
    return seq


# ---------------------------------------------------------------------------
# noise banks


@dataclass
class NoiseBank:
    category: str
    split: str
    clips: list[np.ndarray]                     # each (T_clip, d_a) float32
    sources: list[list[str]] = field(default_factory=list)  # held-out ids per clip


class NoiseBankSet:
    """All noise banks of one corpus, addressable by (category, split)."""

    def __init__(self, banks: list[NoiseBank]):
        self._banks = {(b.category, b.split): b for b in banks}

    def bank(self, category: str, split: str) -> NoiseBank:
        try:
            return self._banks[(category, split)]
        except KeyError:
            raise KeyError(f"no noise bank for ({category!r}, {split!r})") from None

    def clip(self, category: str, split: str, clip_index: int) -> np.ndarray:
        bank = self.bank(category, split)
        if not 0 <= clip_index < len(bank.clips):
            raise KeyError(f"clip {clip_index} out of range for {category}/{split}")
        return bank.clips[clip_index]

    def categories(self, split: str) -> list[str]:
        return sorted(c for (c, s) in self._banks if s == split)

    def all_banks(self) -> list[NoiseBank]:
        return list(self._banks.values())


def heldout_utterance(spec: SynthSpec, index: int) -> tuple[str, np.ndarray]:
    """Synthesize one held-out utterance audio track (never in the corpus)."""
    mu_a, mu_v = symbol_prototypes(spec)
    rng = np.random.default_rng([spec.seed, _STREAM_HELDOUT, index])
    seq = _render_sequence(spec, mu_a, mu_v, f"heldout-{index:04d}", "heldout", rng)
    return seq.id, seq.audio


def _music_clip(rng: np.random.Generator, length: int, d: int, n_tones: int) -> np.ndarray:
    t = np.arange(length)[:, None]
    clip = np.zeros((length, d))
    for _ in range(n_tones):
        freq = rng.uniform(0.5, 6.0)  # cycles per second at 25 fps
        amp = rng.uniform(0.4, 1.0)
        phase = rng.uniform(0, 2 * np.pi, size=(1, d))
        clip += amp * np.sin(2 * np.pi * freq * t / AUDIO_FPS + phase)
    return clip / np.sqrt(n_tones)


def _smoothed_noise(rng: np.random.Generator, length: int, d: int, kernel: int) -> np.ndarray:
    raw = rng.standard_normal((length + kernel, d))
    kern = np.ones(kernel) / kernel
    out = np.stack([np.convolve(raw[:, j], kern, mode="same") for j in range(d)], axis=1)
    return out[:length] * np.sqrt(kernel)  # restore roughly unit power


def _impulse_train(rng: np.random.Generator, length: int, d: int) -> np.ndarray:
    period = int(rng.integers(8, 17))
    clip = 0.3 * rng.standard_normal((length, d))
    clip[::period] += rng.uniform(2.0, 4.0) * rng.standard_normal((len(clip[::period]), d))
    return clip


def generate_noise_banks(
    spec: SynthSpec,
    corpus: Manifest,
    out_dir: str,
    clips_per_bank: int = 6,
    clip_length: int = 200,
    babble_k: int = 3,
    n_heldout: int = 24,
) -> NoiseBankSet:
    """Build and persist synthetic noise banks for every category and split.

    Seen categories exist in all three splits with disjoint clips; unseen
    categories are synthesized for the test split only. Speech and babble
    clips are built from held-out utterances that never enter the paired
    corpus; their source ids are recorded so clips can be recomputed.
    """
    spec.validate()
    if babble_k < 3:
        raise ConfigError("babble_k must be >= 3")
    n_speechy_clips = len(SPLITS) * clips_per_bank * (1 + babble_k)
    if n_heldout < babble_k or n_heldout < clips_per_bank:
        raise GenerationError(
            f"insufficient held-out utterances ({n_heldout}) for "
            f"{clips_per_bank} clips with babble_k={babble_k}"
        )
    del n_speechy_clips

    corpus_ids = set(corpus.ids())
    heldout: dict[int, tuple[str, np.ndarray]] = {}

    def heldout_track(idx: int) -> tuple[str, np.ndarray]:
        if idx not in heldout:
            hid, track = heldout_utterance(spec, idx)
            if hid in corpus_ids:
                raise GenerationError(f"held-out id {hid} collides with corpus")
            heldout[idx] = (hid, track)
        return heldout[idx]

    banks: list[NoiseBank] = []
    for split_idx, split in enumerate(SPLITS):
        categories = list(SEEN_NOISE_CATEGORIES)
        if split == "test":
            categories += list(UNSEEN_NOISE_CATEGORIES)
        for cat in categories:
            _check_category_split(cat, split)
            cat_idx = NOISE_CATEGORIES.index(cat)
            clips, sources = [], []
            for ci in range(clips_per_bank):
                rng = np.random.default_rng(
                    [spec.seed, _STREAM_BANKS, cat_idx, split_idx, ci]
                )
                clip, src = _make_clip(
                    cat, spec, rng, clip_length, babble_k, n_heldout,
                    split_idx, ci, clips_per_bank, heldout_track,
                )
                clips.append(clip.astype(np.float32))
                sources.append(src)
            banks.append(NoiseBank(cat, split, clips, sources))

    bank_set = NoiseBankSet(banks)
    save_noise_banks(bank_set, out_dir)
    return bank_set


def _check_category_split(category: str, split: str) -> None:
    if category not in NOISE_CATEGORIES:
        raise ConfigError(f"unknown noise category {category!r}")
    if category in UNSEEN_NOISE_CATEGORIES and split != "test":
        raise GenerationError(
            f"unseen category {category!r} may only exist in the test split"
        )


def _make_clip(
    category: str,
    spec: SynthSpec,
    rng: np.random.Generator,
    clip_length: int,
    babble_k: int,
    n_heldout: int,
    split_idx: int,
    clip_idx: int,
    clips_per_bank: int,
    heldout_track,
) -> tuple[np.ndarray, list[str]]:
    d = spec.d_a
    # speech/babble draw from a per-split partition of the held-out pool so
    # no source utterance is shared across splits
    pool = n_heldout // len(SPLITS)
    base = split_idx * pool

    if category == "speech":
        idx = base + clip_idx % pool
        hid, track = heldout_track(idx)
        return track.copy(), [hid]
    if category == "babble":
        offsets = (rng.permutation(pool))[:babble_k]
        tracks, ids = [], []
        for off in offsets:
            hid, track = heldout_track(base + int(off))
            tracks.append(track)
            ids.append(hid)
        min_t = min(t.shape[0] for t in tracks)
        clip = np.sum([t[:min_t] for t in tracks], axis=0)
        return clip, ids
    if category == "music":
        return _music_clip(rng, clip_length, d, n_tones=4), []
    if category == "natural":
        return _smoothed_noise(rng, clip_length, d, kernel=5), []
    if category == "unseen_park":
        clip = _smoothed_noise(rng, clip_length, d, kernel=11)
        clip += 0.5 * _music_clip(rng, clip_length, d, n_tones=1)
        return clip, []
    if category == "unseen_cafe":
        offsets = (rng.permutation(pool))[: min(5, pool)]
        tracks, ids = [], []
        for off in offsets:
            hid, track = heldout_track(base + int(off))
            tracks.append(track)
            ids.append(hid)
        min_t = min(t.shape[0] for t in tracks)
        clip = np.sum([t[:min_t] for t in tracks], axis=0)
        clip = clip + 0.5 * _music_clip(rng, min_t, d, n_tones=2)
        return clip, ids
    if category == "unseen_metro":
        return _impulse_train(rng, clip_length, d), []
    if category == "unseen_river":
        return 1.5 * _smoothed_noise(rng, clip_length, d, kernel=25), []
    raise ConfigError(f"unknown noise category {category!r}")


def save_noise_banks(bank_set: NoiseBankSet, out_dir: str) -> None:
    os.makedirs(os.path.join(out_dir, "banks"), exist_ok=True)
    index_path = os.path.join(out_dir, "banks", "banks.jsonl")
    with open(index_path, "w") as f:
        for bank in sorted(bank_set.all_banks(), key=lambda b: (b.category, b.split)):
            stems = []
            for ci, clip in enumerate(bank.clips):
                stem = os.path.join("banks", f"{bank.category}.{bank.split}.{ci:03d}")
                write_tensor(os.path.join(out_dir, stem), clip)
                stems.append(stem)
            f.write(
                json.dumps(
                    {
                        "category": bank.category,
                        "split": bank.split,
                        "clips": stems,
                        "sources": bank.sources,
                    }
                )
                + "\n"
            )


def load_noise_banks(out_dir: str) -> NoiseBankSet:
    index_path = os.path.join(out_dir, "banks", "banks.jsonl")
    if not os.path.exists(index_path):
        raise DependencyError(f"noise bank index not found: {index_path}")
    banks = []
    with open(index_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            clips = [read_tensor(os.path.join(out_dir, stem)) for stem in rec["clips"]]
            banks.append(NoiseBank(rec["category"], rec["split"], clips, rec["sources"]))
    return NoiseBankSet(banks)
