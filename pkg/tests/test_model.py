import math

import numpy as np
import pytest
import torch

from avrobust.errors import ConfigError
from avrobust.model import (
    AVModel,
    ModalityMode,
    ModelConfig,
    load_checkpoint,
    parameter_digest,
    sample_modality_mode,
    save_checkpoint,
)

CFG = ModelConfig(d_model=32, n_blocks=3, n_heads=4, top_k=2, decoder_layers=1,
                  codebook_size=16, video_conv_channels=(4, 8))


def _model(with_decoder=False, seed=0):
    torch.manual_seed(seed)
    m = AVModel(CFG, with_heads=True, with_decoder=with_decoder)
    m.eval()
    return m


def _inputs(b=2, t=12, seed=0):
    rng = np.random.default_rng(seed)
    audio = torch.as_tensor(rng.standard_normal((b, t, CFG.d_audio_in)), dtype=torch.float32)
    video = torch.as_tensor(rng.uniform(0, 1, (b, t) + CFG.video_size), dtype=torch.float32)
    return audio, video


class TestEncoder:
    def test_video_only_ignores_audio(self):
        model = _model()
        audio1, video = _inputs(seed=1)
        audio2, _ = _inputs(seed=2)
        with torch.no_grad():
            out1 = model.encode(audio1, video, ModalityMode.VIDEO_ONLY)
            out2 = model.encode(audio2, video, ModalityMode.VIDEO_ONLY)
        assert torch.equal(out1.final, out2.final)

    def test_audio_only_ignores_video(self):
        model = _model()
        audio, video1 = _inputs(seed=3)
        _, video2 = _inputs(seed=4)
        with torch.no_grad():
            out1 = model.encode(audio, video1, ModalityMode.AUDIO_ONLY)
            out2 = model.encode(audio, video2, ModalityMode.AUDIO_ONLY)
        assert torch.equal(out1.final, out2.final)

    def test_eval_mode_deterministic(self):
        model = _model()
        audio, video = _inputs()
        with torch.no_grad():
            a = model.encode(audio, video, ModalityMode.AV)
            b = model.encode(audio, video, ModalityMode.AV)
        assert torch.equal(a.final, b.final)
        assert all(torch.equal(x, y) for x, y in zip(a.layer_states, b.layer_states))

    def test_layer_states_exposed(self):
        model = _model()
        audio, video = _inputs()
        out = model.encode(audio, video, ModalityMode.AV)
        assert len(out.layer_states) == CFG.n_blocks
        for s in out.layer_states:
            assert s.shape == (2, 12, CFG.d_model)
            assert torch.isfinite(s).all()

    def test_mask_embedding_blocks_frame_content(self):
        # with frame t masked, the output must not depend on frame t's input
        model = _model()
        audio, video = _inputs(seed=5)
        masked_a = torch.zeros(2, 12, dtype=torch.bool)
        masked_v = torch.zeros(2, 12, dtype=torch.bool)
        masked_a[:, 4] = True
        masked_v[:, 4] = True
        audio_mod = audio.clone()
        audio_mod[:, 4] += 3.0
        video_mod = video.clone()
        video_mod[:, 4] = 1.0 - video_mod[:, 4]
        with torch.no_grad():
            out1 = model.encode(audio, video, ModalityMode.AV, mask=(masked_a, masked_v))
            out2 = model.encode(audio_mod, video_mod, ModalityMode.AV,
                                mask=(masked_a, masked_v))
        assert torch.equal(out1.final, out2.final)
        # and without the mask the perturbation must matter
        with torch.no_grad():
            out3 = model.encode(audio, video, ModalityMode.AV)
            out4 = model.encode(audio_mod, video_mod, ModalityMode.AV)
        assert not torch.equal(out3.final, out4.final)

    def test_positions_break_permutation_equivariance(self):
        model = _model()
        audio, video = _inputs(seed=6)
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            out = model.encode(audio, video, ModalityMode.AV)
            out_perm = model.encode(audio[:, perm], video[:, perm], ModalityMode.AV)
        assert not torch.allclose(out.final[:, perm], out_perm.final, atol=1e-5)

    def test_length_mismatch_rejected(self):
        model = _model()
        audio, video = _inputs()
        with pytest.raises(ValueError):
            model.encode(audio[:, :8], video, ModalityMode.AV)


class TestModalityDropout:
    def test_zero_drop_always_av(self):
        rng = np.random.default_rng(0)
        assert all(
            sample_modality_mode(rng, 0.0) is ModalityMode.AV for _ in range(100)
        )

    def test_frequencies(self):
        rng = np.random.default_rng(42)
        draws = [sample_modality_mode(rng, 0.25) for _ in range(10_000)]
        freq_a = sum(d is ModalityMode.AUDIO_ONLY for d in draws) / len(draws)
        freq_v = sum(d is ModalityMode.VIDEO_ONLY for d in draws) / len(draws)
        freq_av = sum(d is ModalityMode.AV for d in draws) / len(draws)
        assert abs(freq_a - 0.25) < 0.02
        assert abs(freq_v - 0.25) < 0.02
        assert abs(freq_av - 0.50) < 0.02

    def test_invalid_p_drop(self):
        with pytest.raises(ConfigError):
            sample_modality_mode(np.random.default_rng(0), 0.6)


class TestHeads:
    def test_heads_have_distinct_parameters(self):
        model = _model()
        params = {
            task: model.heads.heads[task].weight.data_ptr()
            for task in ("mask", "acp", "vcp", "avcp", "macp", "mvcp", "mlm")
        }
        assert len(set(params.values())) == len(params)

    def test_mlm_head_shape(self):
        model = _model()
        audio, video = _inputs()
        out = model.encode(audio, video, ModalityMode.AV)
        logits = model.predict_head("mlm", out.final)
        assert logits.shape == (2, 12, CFG.codebook_size)
        reg = model.predict_head("acp", out.final)
        assert reg.shape == (2, 12, CFG.d_model)

    def test_unknown_task(self):
        model = _model()
        audio, video = _inputs()
        out = model.encode(audio, video, ModalityMode.AV)
        with pytest.raises(ConfigError):
            model.predict_head("nope", out.final)

    def test_export_strips_heads(self, tmp_path):
        from avrobust.training import export_for_finetuning

        model = _model()
        src = str(tmp_path / "with_heads.ckpt")
        dst = str(tmp_path / "exported.ckpt")
        save_checkpoint(model, src, include_heads=True)
        export_for_finetuning(src, dst)
        payload = torch.load(dst, map_location="cpu", weights_only=False)
        assert payload["heads"] is None
        reloaded, _, _ = load_checkpoint(dst)
        assert reloaded.heads is None


class TestDecoder:
    def test_uniform_logits_nll(self):
        model = _model(with_decoder=True)
        torch.nn.init.zeros_(model.decoder.out_proj.weight)
        torch.nn.init.zeros_(model.decoder.out_proj.bias)
        audio, video = _inputs(b=1, t=6)
        with torch.no_grad():
            enc = model.encode(audio, video, ModalityMode.AV)
            tokens = torch.tensor([[CFG.bos_id, 3]])
            labels = torch.tensor([[3, CFG.eos_id]])
            logits = model.decode_logits(enc.final, tokens)
            nll = torch.nn.functional.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), labels.reshape(-1)
            )
        expected = math.log(CFG.vocab_size + 1)
        assert abs(float(nll) - expected) < 1e-6

    def test_greedy_decode_deterministic(self):
        model = _model(with_decoder=True, seed=3)
        audio, video = _inputs(b=3, t=10)
        enc = model.encode(audio, video, ModalityMode.AV)
        h1 = model.greedy_decode(enc.final, max_len=8)
        h2 = model.greedy_decode(enc.final, max_len=8)
        assert h1 == h2
        for hyp in h1:
            assert all(0 <= t < CFG.vocab_size for t in hyp)

    def test_missing_decoder_state_error(self):
        model = _model(with_decoder=False)
        audio, video = _inputs()
        enc = model.encode(audio, video, ModalityMode.AV)
        with pytest.raises(RuntimeError):
            model.decode_logits(enc.final, torch.tensor([[CFG.bos_id]]))


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        model = _model(with_decoder=True, seed=9)
        path = str(tmp_path / "m.ckpt")
        codebook = np.random.default_rng(0).standard_normal((16, CFG.d_model)).astype(np.float32)
        save_checkpoint(model, path, codebook=codebook)
        reloaded, codebook2, _ = load_checkpoint(path)
        reloaded.eval()
        assert np.array_equal(codebook, codebook2)
        assert parameter_digest(model.encoder) == parameter_digest(reloaded.encoder)
        audio, video = _inputs(seed=11)
        with torch.no_grad():
            a = model.encode(audio, video, ModalityMode.AV).final
            b = reloaded.encode(audio, video, ModalityMode.AV).final
        assert torch.equal(a, b)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(top_k=9).validate()
        with pytest.raises(ConfigError):
            ModelConfig(d_model=30, n_heads=4).validate()
