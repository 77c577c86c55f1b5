"""EMA teacher maintenance and clean-target generation.

The teacher starts as a bit-exact copy of the student and is only ever
updated through the exponential moving average p <- eta * p + (1 - eta) * p_s
with eta following a linear schedule. Targets are computed from clean,
unmasked inputs for all three modality modes: the mean of the top-k block
outputs, normalized per frame to zero mean and unit variance across the
feature dimension. Cluster targets come from a k-means codebook built once
over teacher targets and frozen for the run.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .model import AVModel, ModalityMode

TARGET_NORM_EPS = 1e-5


@dataclass
class TargetBundle:
    av: torch.Tensor           # (B, T, d_model)
    a_only: torch.Tensor
    v_only: torch.Tensor
    cluster_ids: torch.Tensor | None   # (B, T) long, or None without a codebook

    def for_mode(self, mode: ModalityMode) -> torch.Tensor:
        """Masked-prediction target under modality dropout: the dropped
        modality's unimodal target, audio-visual otherwise."""
        if mode is ModalityMode.VIDEO_ONLY:
            return self.a_only
        if mode is ModalityMode.AUDIO_ONLY:
            return self.v_only
        return self.av


class EmaTeacher:
    """Holds the teacher model and its decay schedule."""

    def __init__(
        self,
        student: AVModel,
        eta_start: float = 0.99,
        eta_end: float = 0.999,
        total_steps: int = 1,
    ):
        if not 0.0 <= eta_start <= eta_end <= 1.0:
            raise ConfigError("need 0 <= eta_start <= eta_end <= 1")
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.eta_start = eta_start
        self.eta_end = eta_end
        self.total_steps = max(1, total_steps)

    def eta_at(self, step: int) -> float:
        return eta_schedule(step, self.eta_start, self.eta_end, self.total_steps)

    def update(self, student: AVModel, eta: float) -> None:
        ema_update(self.model, student, eta)


def eta_schedule(step: int, eta_start: float, eta_end: float, total_steps: int) -> float:
    """Linear interpolation from eta_start at step 0 to eta_end at
    total_steps, clamped afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step / total_steps, 1.0)
    return eta_start + (eta_end - eta_start) * frac


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, eta: float) -> None:
    """p_teacher <- eta * p_teacher + (1 - eta) * p_student, elementwise."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise RuntimeError("teacher/student parameter sets differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise RuntimeError(f"shape mismatch for {name}: {tp.shape} vs {sp.shape}")
        tp.mul_(eta).add_(sp.detach(), alpha=1.0 - eta)


def normalize_frames(states: torch.Tensor) -> torch.Tensor:
    """Zero-mean, unit-variance normalization across the feature dimension."""
    mean = states.mean(dim=-1, keepdim=True)
    var = states.var(dim=-1, keepdim=True, unbiased=False)
    return (states - mean) / torch.sqrt(var + TARGET_NORM_EPS)


def top_k_average(layer_states: list[torch.Tensor], k: int) -> torch.Tensor:
    if not 1 <= k <= len(layer_states):
        raise ConfigError(f"top_k must be in [1, {len(layer_states)}], got {k}")
    return torch.stack(layer_states[-k:], dim=0).mean(dim=0)


@torch.no_grad()
def make_targets(
    teacher: AVModel,
    audio: torch.Tensor,
    video: torch.Tensor,
    k: int,
    codebook: np.ndarray | None = None,
    key_padding_mask: torch.Tensor | None = None,
) -> TargetBundle:
    """Teacher targets for the three modality modes from clean inputs."""
    teacher.eval()
    outs = {}
    for mode in (ModalityMode.AV, ModalityMode.AUDIO_ONLY, ModalityMode.VIDEO_ONLY):
        enc = teacher.encode(audio, video, mode, key_padding_mask=key_padding_mask)
        outs[mode] = normalize_frames(top_k_average(enc.layer_states, k))
    cluster_ids = None
    if codebook is not None:
        cluster_ids = assign_clusters(outs[ModalityMode.AV], codebook)
    return TargetBundle(
        av=outs[ModalityMode.AV],
        a_only=outs[ModalityMode.AUDIO_ONLY],
        v_only=outs[ModalityMode.VIDEO_ONLY],
        cluster_ids=cluster_ids,
    )


def assign_clusters(targets: torch.Tensor, codebook: np.ndarray) -> torch.Tensor:
    """Nearest-codeword index per frame under Euclidean distance."""
    codes = torch.as_tensor(codebook, dtype=targets.dtype, device=targets.device)
    dists = torch.cdist(targets.reshape(-1, targets.shape[-1]), codes)
    return dists.argmin(dim=-1).reshape(targets.shape[:-1])


def build_codebook(
    teacher: AVModel,
    sequences: list[tuple[torch.Tensor, torch.Tensor]],
    codebook_size: int,
    k: int,
    seed: int = 0,
    n_iterations: int = 20,
) -> np.ndarray:
    """K-means codebook over teacher audio-visual targets of clean sequences.

    sequences is a list of (audio (T, d_a), video (T, H, W)) tensors. Built
    once at the start of uptraining and frozen for the run.
    """
    frames = []
    with torch.no_grad():
        for audio, video in sequences:
            enc = teacher.encode(audio.unsqueeze(0), video.unsqueeze(0), ModalityMode.AV)
            target = normalize_frames(top_k_average(enc.layer_states, k))
            frames.append(target.squeeze(0).cpu().numpy())
    points = np.concatenate(frames, axis=0).astype(np.float64)
    if points.shape[0] < codebook_size * 10:
        raise ConfigError(
            f"need at least {codebook_size * 10} frames to build the codebook, "
            f"got {points.shape[0]}"
        )

    rng = np.random.default_rng(seed)
    init_idx = rng.choice(points.shape[0], size=codebook_size, replace=False)
    centers = points[init_idx].copy()
    for _ in range(n_iterations):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for c in range(codebook_size):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers.astype(np.float32)
