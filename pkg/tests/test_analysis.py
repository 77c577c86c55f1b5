import numpy as np
import pytest
import torch

from avrobust.analysis import embed_set, modality_gap, similarity
from avrobust.corruption import CorruptionConfig
from avrobust.model import AVModel, ModalityMode, ModelConfig

CFG = ModelConfig(d_model=32, n_blocks=2, n_heads=4, top_k=2,
                  codebook_size=8, video_conv_channels=(4, 8))


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(21)
    model = AVModel(CFG, with_heads=False)
    model.eval()
    return model


class TestEmbedSet:
    def test_identical_ids_identical_rows(self, tiny_model, test_cache):
        sid = test_cache.ids()[0]
        emb = embed_set(tiny_model, test_cache, [sid, sid])
        assert np.array_equal(emb[0], emb[1])

    def test_video_only_ignores_audio(self, tiny_model, test_cache):
        ids = test_cache.ids()[:3]
        emb1 = embed_set(tiny_model, test_cache, ids, ModalityMode.VIDEO_ONLY)
        # clobber the audio tracks; the video-only embedding must not move
        backup = {sid: test_cache.sequences[sid].audio.copy() for sid in ids}
        try:
            for sid in ids:
                test_cache.sequences[sid].audio += 5.0
            emb2 = embed_set(tiny_model, test_cache, ids, ModalityMode.VIDEO_ONLY)
        finally:
            for sid in ids:
                test_cache.sequences[sid].audio = backup[sid]
        assert np.array_equal(emb1, emb2)

    def test_mean_pool_matches_recomputed_states(self, tiny_model, test_cache):
        sid = test_cache.ids()[1]
        seq = test_cache.sequences[sid]
        emb = embed_set(tiny_model, test_cache, [sid])
        with torch.no_grad():
            enc = tiny_model.encode(
                torch.as_tensor(seq.audio).unsqueeze(0),
                torch.as_tensor(seq.video).unsqueeze(0),
                ModalityMode.AV,
            )
        brute = enc.final.squeeze(0).numpy().mean(axis=0)
        np.testing.assert_allclose(emb[0], brute, rtol=1e-5, atol=1e-6)

    def test_corruption_is_seeded(self, tiny_model, test_cache):
        ids = test_cache.ids()[:2]
        cfg = CorruptionConfig()
        a = embed_set(tiny_model, test_cache, ids, corruption=cfg, seed=4)
        b = embed_set(tiny_model, test_cache, ids, corruption=cfg, seed=4)
        c = embed_set(tiny_model, test_cache, ids, corruption=cfg, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_empty_set_rejected(self, tiny_model, test_cache):
        with pytest.raises(ValueError):
            embed_set(tiny_model, test_cache, [])


class TestSimilarity:
    def test_identical_sets(self):
        rng = np.random.default_rng(1)
        emb = rng.standard_normal((4, 8))
        rep = similarity(emb, emb.copy(), [f"s{i}" for i in range(4)])
        np.testing.assert_allclose(np.diag(rep.matrix), 1.0, atol=1e-12)
        assert rep.d_bar == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_rows(self):
        clean = np.eye(3)
        corrupted = np.roll(np.eye(3), 1, axis=1)
        rep = similarity(clean, corrupted, ["a", "b", "c"])
        np.testing.assert_allclose(np.diag(rep.matrix), 0.0, atol=1e-12)

    def test_hand_built_oracle(self):
        clean = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        corrupted = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        rep = similarity(clean, corrupted, ["a", "b", "c"])
        nc = clean / np.linalg.norm(clean, axis=1, keepdims=True)
        nr = corrupted / np.linalg.norm(corrupted, axis=1, keepdims=True)
        np.testing.assert_allclose(rep.matrix, nc @ nr.T, rtol=1e-12)
        np.testing.assert_allclose(
            rep.d_bar, np.mean(np.linalg.norm(nc - nr, axis=1)), rtol=1e-12
        )
        # spot values: cos between (1,0) and (0,1) is 0; between (1,1)/sqrt2
        # and (1,0) is 1/sqrt2
        assert rep.matrix[0, 0] == pytest.approx(0.0)
        assert rep.matrix[1, 1] == pytest.approx(1 / np.sqrt(2))

    def test_bounds(self):
        rng = np.random.default_rng(3)
        rep = similarity(
            rng.standard_normal((6, 5)), rng.standard_normal((6, 5)),
            [str(i) for i in range(6)],
        )
        assert np.all(rep.matrix <= 1.0 + 1e-12)
        assert np.all(rep.matrix >= -1.0 - 1e-12)
        assert rep.d_bar >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            similarity(np.zeros((2, 3)), np.zeros((3, 3)), ["a", "b"])


class TestModalityGap:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(2)
        emb = rng.standard_normal((5, 6))
        (rep,) = modality_gap({"av": emb}, [("av", "av")])
        assert rep.d_avg == pytest.approx(0.0, abs=1e-12)

    def test_translation(self):
        rng = np.random.default_rng(4)
        emb = rng.standard_normal((5, 6))
        shift = rng.standard_normal(6)
        (rep,) = modality_gap({"x": emb, "y": emb + shift}, [("x", "y")])
        assert rep.d_avg == pytest.approx(float(np.linalg.norm(shift)), rel=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        sets = {"a": rng.standard_normal((7, 4)), "b": rng.standard_normal((9, 4))}
        (rep,) = modality_gap(sets, [("a", "b")])
        brute = np.linalg.norm(sets["a"].mean(axis=0) - sets["b"].mean(axis=0))
        assert rep.d_avg == pytest.approx(float(brute), rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        sets = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal((4, 4))}
        ab = modality_gap(sets, [("a", "b")])[0].d_avg
        ba = modality_gap(sets, [("b", "a")])[0].d_avg
        assert ab == ba

    def test_needs_two_sequences(self):
        with pytest.raises(ValueError):
            modality_gap({"a": np.zeros((1, 3)), "b": np.zeros((4, 3))}, [("a", "b")])
