"""Representation diagnostics: clean-vs-corrupted similarity and the
cross-modal gap between mean embeddings.

A sequence embedding is the mean over frames of the final encoder states.
Similarity matrices use cosine over L2-normalized rows and report the mean
normalized L2 distance between same-id pairs; modality gaps use raw (not
normalized) mean embeddings so translations are measured faithfully.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch

from .corruption import CorruptionConfig, apply_audio, apply_video, sample_plan
from .model import AVModel, ModalityMode
from .training import CorpusCache, _collate


@dataclass
class SimilarityReport:
    matrix: np.ndarray        # (n, n) cosine similarities
    d_bar: float              # mean per-sample normalized L2 distance
    labels: list[str]

    def to_json(self) -> str:
        return json.dumps(
            {"labels": self.labels, "d_bar": self.d_bar, "matrix": self.matrix.tolist()},
            indent=2,
        )


@dataclass
class GapReport:
    pair: tuple[str, str]
    d_avg: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@torch.no_grad()
def embed_set(
    model: AVModel,
    corpus: CorpusCache,
    ids: list[str],
    mode: ModalityMode = ModalityMode.AV,
    corruption: CorruptionConfig | None = None,
    seed: int = 0,
    bank_split: str = "test",
) -> np.ndarray:
    """Mean-pooled final encoder states, one row per sequence."""
    if not ids:
        raise ValueError("embed_set needs at least one sequence")
    model.eval()
    audio_tracks, video_tracks = [], []
    for seq_idx, sid in enumerate(ids):
        seq = corpus.sequences[sid]
        audio, video = seq.audio, seq.video
        if corruption is not None:
            rng = np.random.default_rng([seed, seq_idx])
            plan = sample_plan(
                seq.length, corruption, rng,
                banks=corpus.banks, bank_split=bank_split, patch_bank=corpus.patch_bank,
            )
            audio = apply_audio(audio, plan, corpus.banks, bank_split)
            video = apply_video(video, plan, corpus.patch_bank)
        audio_tracks.append(audio)
        video_tracks.append(video)

    audio, pad = _collate(audio_tracks)
    video, _ = _collate(video_tracks)
    enc = model.encode(audio, video, mode, key_padding_mask=pad)
    valid = (~pad).float().unsqueeze(-1)
    pooled = (enc.final * valid).sum(dim=1) / valid.sum(dim=1)
    return pooled.cpu().numpy()


def _normalize_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.maximum(norms, 1e-12)


def similarity(
    clean: np.ndarray, corrupted: np.ndarray, labels: list[str]
) -> SimilarityReport:
    """Cosine similarity matrix and mean normalized L2 distance.

    Row i of `clean` and row i of `corrupted` must describe the same id.
    """
    if clean.shape != corrupted.shape:
        raise ValueError(f"embedding shape mismatch: {clean.shape} vs {corrupted.shape}")
    if len(labels) != clean.shape[0]:
        raise ValueError("labels/embedding count mismatch")
    nc = _normalize_rows(clean)
    nr = _normalize_rows(corrupted)
    matrix = nc @ nr.T
    d_bar = float(np.mean(np.linalg.norm(nc - nr, axis=1)))
    return SimilarityReport(matrix=matrix, d_bar=d_bar, labels=list(labels))


def modality_gap(embeddings: dict[str, np.ndarray],
                 pairs: list[tuple[str, str]]) -> list[GapReport]:
    """Distance between mean embeddings for each requested mode pair."""
    reports = []
    for a, b in pairs:
        if embeddings[a].shape[0] < 2 or embeddings[b].shape[0] < 2:
            raise ValueError("modality_gap needs at least 2 sequences per set")
        d = float(np.linalg.norm(embeddings[a].mean(axis=0) - embeddings[b].mean(axis=0)))
        reports.append(GapReport(pair=(a, b), d_avg=d))
    return reports
