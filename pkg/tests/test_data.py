import hashlib
import os

import numpy as np
import pytest

from avrobust.data import (
    SynthSpec,
    generate_corpus,
    generate_noise_banks,
    heldout_utterance,
    load_manifest,
    load_sequence,
    symbol_prototypes,
)
from avrobust.errors import ConfigError, DataFormatError, GenerationError


def _tree_digest(root):
    digest = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as f:
                digest.update(f.read())
    return digest.hexdigest()


class TestGenerateCorpus:
    def test_same_seed_bit_identical(self, tmp_path):
        spec = SynthSpec(seed=7)
        generate_corpus(spec, 2, 1, 1, str(tmp_path / "a"))
        generate_corpus(spec, 2, 1, 1, str(tmp_path / "b"))
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_zero_jitter_renders_exact_prototypes(self, tmp_path):
        spec = SynthSpec(seed=3, jitter_std=0.0)
        manifest = generate_corpus(spec, 4, 1, 1, str(tmp_path))
        mu_a = symbol_prototypes(spec)[0].astype(np.float32)
        for sid in manifest.ids("train"):
            seq = load_sequence(manifest, sid)
            # every frame equals its symbol's prototype row exactly, so the
            # run-length-merged frame symbols equal the merged transcript
            frame_syms = []
            for row in seq.audio:
                matches = [s for s in range(spec.vocab_size) if np.array_equal(row, mu_a[s])]
                assert len(matches) == 1
                frame_syms.append(matches[0])
            merged_frames = [s for i, s in enumerate(frame_syms)
                             if i == 0 or s != frame_syms[i - 1]]
            merged_ref = [s for i, s in enumerate(seq.transcript)
                          if i == 0 or s != seq.transcript[i - 1]]
            assert merged_frames == merged_ref

    def test_symbol_means_recover_prototypes(self, tmp_path):
        # law-of-large-numbers oracle on the generated files, frozen seed
        spec = SynthSpec(seed=44)
        manifest = generate_corpus(spec, 200, 1, 1, str(tmp_path))
        mu_a = symbol_prototypes(spec)[0]
        sums = np.zeros_like(mu_a)
        counts = np.zeros(spec.vocab_size)
        for sid in manifest.ids("train"):
            seq = load_sequence(manifest, sid)
            d2 = ((seq.audio[:, None, :].astype(np.float64) - mu_a[None]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            for s in range(spec.vocab_size):
                rows = seq.audio[assign == s]
                sums[s] += rows.sum(axis=0)
                counts[s] += len(rows)
        assert counts.min() > 30
        means = sums / counts[:, None]
        bound = 3.0 * spec.jitter_std / np.sqrt(counts)[:, None]
        assert np.all(np.abs(means - mu_a) <= bound)

    def test_splits_partition_ids(self, small_corpus):
        manifest = small_corpus["manifest"]
        train = set(manifest.ids("train"))
        valid = set(manifest.ids("valid"))
        test = set(manifest.ids("test"))
        assert not (train & valid) and not (train & test) and not (valid & test)
        assert train | valid | test == set(manifest.ids())

    def test_lengths_consistent(self, small_corpus):
        spec = small_corpus["spec"]
        lo, hi = spec.symbol_duration_range
        for sid in small_corpus["manifest"].ids():
            seq = load_sequence(small_corpus["manifest"], sid)
            assert seq.audio.shape == (seq.length, spec.d_a)
            assert seq.video.shape == (seq.length,) + spec.video_size
            assert lo * len(seq.transcript) <= seq.length <= hi * len(seq.transcript)
            assert 0.0 <= seq.video.min() and seq.video.max() <= 1.0

    def test_bad_config_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_corpus(SynthSpec(vocab_size=1), 1, 1, 1, str(tmp_path))
        with pytest.raises(ConfigError):
            generate_corpus(SynthSpec(), 0, 1, 1, str(tmp_path))


class TestLoadSequence:
    def test_roundtrip_bit_exact(self, small_corpus, tmp_path):
        spec = SynthSpec(seed=19)
        manifest = generate_corpus(spec, 1, 1, 1, str(tmp_path))
        reloaded = load_manifest(str(tmp_path))
        for sid in manifest.ids():
            a = load_sequence(manifest, sid)
            b = load_sequence(reloaded, sid)
            assert np.array_equal(a.audio, b.audio)
            assert np.array_equal(a.video, b.video)
            assert a.transcript == b.transcript

    def test_unknown_id(self, small_corpus):
        with pytest.raises(KeyError, match="missing"):
            load_sequence(small_corpus["manifest"], "missing")

    def test_truncated_file_names_it(self, tmp_path):
        spec = SynthSpec(seed=5)
        manifest = generate_corpus(spec, 1, 1, 1, str(tmp_path))
        entry = manifest.entry("train-0000")
        victim = os.path.join(str(tmp_path), entry.path + ".audio.bin")
        with open(victim, "r+b") as f:
            f.truncate(8)
        with pytest.raises(DataFormatError, match="train-0000.audio"):
            load_sequence(manifest, "train-0000")


class TestNoiseBanks:
    def test_speech_clip_is_one_heldout_track(self, small_corpus):
        bank = small_corpus["banks"].bank("speech", "train")
        for clip, sources in zip(bank.clips, bank.sources):
            assert len(sources) == 1
            idx = int(sources[0].split("-")[1])
            _, track = heldout_utterance(small_corpus["spec"], idx)
            assert np.array_equal(clip, track.astype(np.float32))

    def test_babble_clip_is_sum_of_logged_sources(self, small_corpus):
        bank = small_corpus["banks"].bank("babble", "train")
        for clip, sources in zip(bank.clips, bank.sources):
            assert len(sources) == 3
            tracks = [
                heldout_utterance(small_corpus["spec"], int(s.split("-")[1]))[1]
                for s in sources
            ]
            t = min(tr.shape[0] for tr in tracks)
            expected = np.sum([tr[:t] for tr in tracks], axis=0).astype(np.float32)
            assert np.array_equal(clip, expected)

    def test_sources_never_in_corpus(self, small_corpus):
        corpus_ids = set(small_corpus["manifest"].ids())
        for bank in small_corpus["banks"].all_banks():
            for sources in bank.sources:
                assert not (set(sources) & corpus_ids)

    def test_unseen_only_in_test_split(self, small_corpus):
        banks = small_corpus["banks"]
        for split in ("train", "valid"):
            assert all(not c.startswith("unseen") for c in banks.categories(split))
        assert "unseen_park" in banks.categories("test")

    def test_unseen_in_train_rejected(self):
        from avrobust.data import _check_category_split

        with pytest.raises(GenerationError):
            _check_category_split("unseen_park", "train")

    def test_split_clips_disjoint(self, small_corpus):
        banks = small_corpus["banks"]
        for cat in ("speech", "babble"):
            per_split = [
                {s for srcs in banks.bank(cat, split).sources for s in srcs}
                for split in ("train", "valid", "test")
            ]
            assert not (per_split[0] & per_split[1])
            assert not (per_split[0] & per_split[2])
            assert not (per_split[1] & per_split[2])

    def test_insufficient_heldout(self, small_corpus, tmp_path):
        with pytest.raises(GenerationError):
            generate_noise_banks(
                small_corpus["spec"], small_corpus["manifest"], str(tmp_path),
                n_heldout=2,
            )
