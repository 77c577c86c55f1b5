"""Compact multimodal encoder, per-task prediction heads, and the
sequence-to-sequence decoder used for recognition fine-tuning.

The encoder runs a small per-frame extractor for each modality (linear for
audio features, a two-layer conv stack for video frames), substitutes a
learned mask embedding at masked frames, zeroes the features of a dropped
modality, fuses by concatenation + projection, adds fixed sinusoidal
positions, and applies a stack of pre-norm transformer blocks whose
intermediate outputs are all exposed for target averaging.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

TASKS = ("mask", "mlm", "avcp", "acp", "vcp", "macp", "mvcp")
REGRESSION_TASKS = tuple(t for t in TASKS if t != "mlm")

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    top_k: int = 2
    video_conv_channels: tuple[int, ...] = (8, 16)
    decoder_layers: int = 2
    codebook_size: int = 64
    d_audio_in: int = 26
    video_size: tuple[int, int] = (16, 16)
    vocab_size: int = 16

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.n_blocks:
            raise ConfigError(f"top_k must be in [1, {self.n_blocks}], got {self.top_k}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even (features split per modality)")

    @property
    def eos_id(self) -> int:
        return self.vocab_size

    @property
    def bos_id(self) -> int:
        return self.vocab_size + 1

    @property
    def n_token_classes(self) -> int:
        # transcript vocabulary plus the end token
        return self.vocab_size + 1


class ModalityMode(enum.Enum):
    AV = "av"
    AUDIO_ONLY = "audio"
    VIDEO_ONLY = "video"


def sample_modality_mode(rng: np.random.Generator, p_drop: float = 0.25) -> ModalityMode:
    """Draw a modality mode: each single-modality mode with probability p_drop."""
    if not 0.0 <= p_drop <= 0.5:
        raise ConfigError(f"p_drop must be in [0, 0.5], got {p_drop}")
    u = rng.random()
    if u < p_drop:
        return ModalityMode.AUDIO_ONLY
    if u < 2 * p_drop:
        return ModalityMode.VIDEO_ONLY
    return ModalityMode.AV


@dataclass
class EncoderOutput:
    layer_states: list[torch.Tensor]   # n_blocks tensors of shape (B, T, d_model)
    final: torch.Tensor                # (B, T, d_model), layer-normed last state


def sinusoidal_positions(T: int, d: int, device, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(T, device=device, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d, 2, device=device, dtype=torch.float64)
        * (-math.log(10000.0) / d)
    )
    pe = torch.zeros(T, d, device=device, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe.to(dtype)


class VideoFrameExtractor(nn.Module):
    """Per-frame conv stack mapping (H, W) grayscale frames to d_out vectors."""

    def __init__(self, cfg: ModelConfig, d_out: int):
        super().__init__()
        c1, c2 = cfg.video_conv_channels
        self.conv1 = nn.Conv2d(1, c1, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, padding=1)
        self.pool = nn.MaxPool2d(2)
        h, w = cfg.video_size
        flat = c2 * (h // 4) * (w // 4)
        self.proj = nn.Linear(flat, d_out)

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        b, t, h, w = video.shape
        x = video.reshape(b * t, 1, h, w)
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return self.proj(x.flatten(1)).reshape(b, t, -1)


class MultimodalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d_half = cfg.d_model // 2
        self.audio_proj = nn.Linear(cfg.d_audio_in, d_half)
        self.video_extractor = VideoFrameExtractor(cfg, d_half)
        self.audio_mask_embedding = nn.Parameter(torch.empty(d_half).normal_(0.0, 0.02))
        self.video_mask_embedding = nn.Parameter(torch.empty(d_half).normal_(0.0, 0.02))
        self.fusion = nn.Linear(cfg.d_model, cfg.d_model)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.d_model,
                nhead=cfg.n_heads,
                dim_feedforward=4 * cfg.d_model,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(
        self,
        audio: torch.Tensor | None,
        video: torch.Tensor | None,
        mode: ModalityMode,
        audio_masked: torch.Tensor | None = None,
        video_masked: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
    ) -> EncoderOutput:
        """Encode a batch.

        audio: (B, T, d_audio_in) or None; video: (B, T, H, W) or None;
        *_masked: boolean (B, T) of frames to replace with the mask embedding;
        key_padding_mask: boolean (B, T), True at padding positions. The
        dropped modality's features are zeroed after extraction, so the
        output is independent of that modality's content.
        """
        if audio is not None and video is not None:
            if audio.shape[1] != video.shape[1] or audio.shape[0] != video.shape[0]:
                raise ValueError(
                    f"audio/video shape mismatch: {tuple(audio.shape[:2])} vs "
                    f"{tuple(video.shape[:2])}"
                )
        ref = audio if audio is not None else video
        if ref is None:
            raise ValueError("at least one modality tensor is required")
        b, t = ref.shape[0], ref.shape[1]
        d_half = self.cfg.d_model // 2
        dtype = self.fusion.weight.dtype
        device = ref.device

        if mode is ModalityMode.VIDEO_ONLY or audio is None:
            a_feat = torch.zeros(b, t, d_half, device=device, dtype=dtype)
        else:
            a_feat = self.audio_proj(audio)
            if audio_masked is not None and audio_masked.any():
                a_feat = torch.where(
                    audio_masked.unsqueeze(-1),
                    self.audio_mask_embedding.to(dtype).expand(b, t, d_half),
                    a_feat,
                )
        if mode is ModalityMode.AUDIO_ONLY or video is None:
            v_feat = torch.zeros(b, t, d_half, device=device, dtype=dtype)
        else:
            v_feat = self.video_extractor(video)
            if video_masked is not None and video_masked.any():
                v_feat = torch.where(
                    video_masked.unsqueeze(-1),
                    self.video_mask_embedding.to(dtype).expand(b, t, d_half),
                    v_feat,
                )

        x = self.fusion(torch.cat([a_feat, v_feat], dim=-1))
        x = x + sinusoidal_positions(t, self.cfg.d_model, device, dtype).unsqueeze(0)

        states = []
        for block in self.blocks:
            x = block(x, src_key_padding_mask=key_padding_mask)
            states.append(x)
        return EncoderOutput(layer_states=states, final=self.final_norm(x))


class TaskHeads(nn.Module):
    """One single-layer predictor per self-supervised task, dropped after
    uptraining."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = nn.ModuleDict(
            {
                task: nn.Linear(
                    cfg.d_model,
                    cfg.codebook_size if task == "mlm" else cfg.d_model,
                )
                for task in TASKS
            }
        )

    def forward(self, task: str, states: torch.Tensor) -> torch.Tensor:
        if task not in self.heads:
            raise ConfigError(f"unknown task {task!r}")
        return self.heads[task](states)


class TranscriptDecoder(nn.Module):
    """Autoregressive transformer decoder over transcript tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size + 2, cfg.d_model)  # symbols+eos+bos
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                d_model=cfg.d_model,
                nhead=cfg.n_heads,
                dim_feedforward=4 * cfg.d_model,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            )
            for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.n_token_classes)

    def forward(
        self,
        memory: torch.Tensor,
        tokens: torch.Tensor,
        memory_key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Next-token logits for a teacher-forced prefix (B, S) -> (B, S, C)."""
        b, s = tokens.shape
        x = self.embedding(tokens)
        x = x + sinusoidal_positions(s, self.cfg.d_model, tokens.device, x.dtype).unsqueeze(0)
        causal = torch.triu(
            torch.ones(s, s, device=tokens.device, dtype=torch.bool), diagonal=1
        )
        for layer in self.layers:
            x = layer(
                x,
                memory,
                tgt_mask=causal,
                memory_key_padding_mask=memory_key_padding_mask,
            )
        return self.out_proj(self.norm(x))


class AVModel(nn.Module):
    """Encoder plus optional task heads and optional decoder."""

    def __init__(self, cfg: ModelConfig, with_heads: bool = True, with_decoder: bool = False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = MultimodalEncoder(cfg)
        self.heads = TaskHeads(cfg) if with_heads else None
        self.decoder = TranscriptDecoder(cfg) if with_decoder else None

    def encode(self, audio, video, mode: ModalityMode, mask=None, key_padding_mask=None):
        audio_masked = video_masked = None
        if mask is not None:
            audio_masked, video_masked = mask
        return self.encoder(
            audio, video, mode,
            audio_masked=audio_masked,
            video_masked=video_masked,
            key_padding_mask=key_padding_mask,
        )

    def predict_head(self, task: str, states: torch.Tensor) -> torch.Tensor:
        if self.heads is None:
            raise RuntimeError("model has no task heads attached")
        return self.heads(task, states)

    def decode_logits(self, memory, tokens, memory_key_padding_mask=None):
        if self.decoder is None:
            raise RuntimeError("model has no decoder attached")
        return self.decoder(memory, tokens, memory_key_padding_mask)

    @torch.no_grad()
    def greedy_decode(
        self,
        memory: torch.Tensor,
        memory_key_padding_mask: torch.Tensor | None = None,
        max_len: int = 24,
    ) -> list[list[int]]:
        """Greedy autoregressive decoding until the end token."""
        b = memory.shape[0]
        device = memory.device
        tokens = torch.full((b, 1), self.cfg.bos_id, dtype=torch.long, device=device)
        finished = torch.zeros(b, dtype=torch.bool, device=device)
        for _ in range(max_len):
            logits = self.decode_logits(memory, tokens, memory_key_padding_mask)
            nxt = logits[:, -1].argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, self.cfg.eos_id), nxt)
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
            finished |= nxt == self.cfg.eos_id
            if bool(finished.all()):
                break
        out = []
        for row in tokens[:, 1:].tolist():
            seq = []
            for tok in row:
                if tok == self.cfg.eos_id:
                    break
                seq.append(tok)
            out.append(seq)
        return out


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_json(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg))


def _config_from_json(payload: str) -> ModelConfig:
    raw = json.loads(payload)
    for key in ("video_conv_channels", "video_size"):
        raw[key] = tuple(raw[key])
    return ModelConfig(**raw)


def save_checkpoint(
    model: AVModel,
    path: str,
    codebook: np.ndarray | None = None,
    include_heads: bool = True,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_json": _config_to_json(model.cfg),
        "encoder": model.encoder.state_dict(),
        "heads": model.heads.state_dict() if (include_heads and model.heads) else None,
        "decoder": model.decoder.state_dict() if model.decoder else None,
        "codebook": codebook,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str, with_decoder: bool | None = None
) -> tuple[AVModel, np.ndarray | None, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise RuntimeError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    cfg = _config_from_json(payload["config_json"])
    has_decoder = payload["decoder"] is not None if with_decoder is None else with_decoder
    model = AVModel(cfg, with_heads=payload["heads"] is not None, with_decoder=has_decoder)
    model.encoder.load_state_dict(payload["encoder"])
    if payload["heads"] is not None and model.heads is not None:
        model.heads.load_state_dict(payload["heads"])
    if payload["decoder"] is not None and model.decoder is not None:
        model.decoder.load_state_dict(payload["decoder"])
    return model, payload["codebook"], payload.get("extra", {})


def checkpoint_has_heads(path: str) -> bool:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return payload.get("heads") is not None


def parameter_digest(module: nn.Module) -> str:
    """Stable hash of all parameters, for freeze-contract checks."""
    buf = io.BytesIO()
    for name, p in sorted(module.named_parameters()):
        buf.write(name.encode())
        buf.write(p.detach().cpu().numpy().tobytes())
    return hashlib.sha256(buf.getvalue()).hexdigest()
