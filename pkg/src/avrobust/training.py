"""Uptraining and fine-tuning loops with WER evaluation.

Uptraining: per step, every sequence in the batch gets a corruption plan, a
mask plan disjoint from it, and a modality-dropout mode. The teacher encodes
the clean batch once per mode to produce targets; the student runs the
masked+corrupted multimodal pass plus (when the weights ask for them)
corrupted unimodal passes. The weighted multi-task loss is stepped with
AdamW under a warmup + polynomial-decay schedule, and the teacher follows by
EMA. Every step is logged as one JSON line carrying the full per-sequence
plans so losses can be replayed bit-for-bit from the initial checkpoint.

Fine-tuning: a fresh decoder is trained with teacher-forced NLL on corrupted
inputs; the encoder stays frozen for the first freeze fraction of steps.

Evaluation: a grid of (visual kind, audio category, SNR) cells, each decoded
greedily and scored with corpus-level WER, plus aggregates over all cells and
over the noise-dominant (SNR <= 0) subset.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import losses as L
from .corruption import (
    CorruptionConfig,
    CorruptionPlan,
    PatchBank,
    UNSEEN_VISUAL_KINDS,
    apply_audio,
    apply_video,
    mix_noise_at_snr,
)
from .data import (
    Manifest,
    NoiseBankSet,
    PairedSequence,
    UNSEEN_NOISE_CATEGORIES,
    load_sequence,
)
from .distillation import EmaTeacher, TargetBundle, build_codebook, make_targets
from .errors import ConfigError, DependencyError, DivergenceError
from .losses import LossAccumulator, LossBundle, TaskWeights, total_loss
from .masking import MaskConfig, MaskPlan, sample_mask_plan
from .model import (
    AVModel,
    ModalityMode,
    ModelConfig,
    load_checkpoint,
    sample_modality_mode,
    save_checkpoint,
)
from .corruption import sample_plan

_MODE_ORDER = (ModalityMode.AV, ModalityMode.AUDIO_ONLY, ModalityMode.VIDEO_ONLY)


@dataclass
class UptrainConfig:
    steps: int = 3000
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int | None = None          # defaults to 5% of steps
    decay_exponent: float = 1.0
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    weights: TaskWeights = field(default_factory=TaskWeights)
    clean_noise_prob: float = 0.25           # whole-utterance 0 dB augmentation
    modality_dropout: float = 0.25
    eta_start: float = 0.99
    eta_end: float = 0.999
    max_frames_per_batch: int = 2000
    seed: int = 0

    def resolved_warmup(self) -> int:
        if self.warmup_steps is None:
            return max(1, int(round(0.05 * self.steps)))
        return self.warmup_steps

    def validate(self) -> None:
        if not self.steps > self.resolved_warmup() >= 0:
            raise ConfigError("need steps > warmup_steps >= 0")
        if not 0.0 <= self.clean_noise_prob <= 1.0:
            raise ConfigError("clean_noise_prob must be in [0, 1]")
        self.corruption.validate()
        self.mask.validate()
        self.weights.validate()


@dataclass
class FinetuneConfig:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int | None = None          # defaults to 10% of steps
    decay_exponent: float = 1.0
    freeze_encoder_frac: float = 0.8
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    audio_aug_prob: float = 0.25             # whole-utterance noise probability
    audio_aug_snr_mean: float = 0.0
    audio_aug_snr_std: float = 5.0
    max_frames_per_batch: int = 2000
    seed: int = 0

    def resolved_warmup(self) -> int:
        if self.warmup_steps is None:
            return max(1, int(round(0.10 * self.steps)))
        return self.warmup_steps

    def validate(self) -> None:
        if not 0.0 <= self.freeze_encoder_frac <= 1.0:
            raise ConfigError("freeze_encoder_frac must be in [0, 1]")
        if not self.steps > self.resolved_warmup() >= 0:
            raise ConfigError("need steps > warmup_steps >= 0")
        self.corruption.validate()


# ---------------------------------------------------------------------------
# corpus access


class CorpusCache:
    """In-memory view of a corpus split plus its noise and patch banks."""

    def __init__(
        self,
        manifest: Manifest,
        banks: NoiseBankSet | None,
        patch_bank: PatchBank | None,
        split: str,
    ):
        self.manifest = manifest
        self.banks = banks
        self.patch_bank = patch_bank
        self.split = split
        self.sequences: dict[str, PairedSequence] = {
            sid: load_sequence(manifest, sid) for sid in manifest.ids(split)
        }
        if not self.sequences:
            raise DependencyError(f"corpus has no sequences in split {split!r}")

    def ids(self) -> list[str]:
        return sorted(self.sequences)

    def max_transcript_len(self) -> int:
        return max(len(s.transcript) for s in self.sequences.values())


def budget_batches(
    ids: list[str],
    lengths: dict[str, int],
    max_frames: int,
    rng: np.random.Generator,
):
    """Yield id batches under a frame budget, reshuffling every epoch."""
    while True:
        order = list(rng.permutation(ids))
        batch: list[str] = []
        frames = 0
        for sid in order:
            if batch and frames + lengths[sid] > max_frames:
                yield batch
                batch, frames = [], 0
            batch.append(sid)
            frames += lengths[sid]
        if batch:
            yield batch


def _collate(arrays: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (T, ...) arrays with zero padding.

    Returns (batch tensor, pad mask (B, Tmax) True at padding)."""
    b = len(arrays)
    t_max = max(a.shape[0] for a in arrays)
    out = torch.zeros((b, t_max) + arrays[0].shape[1:], dtype=dtype)
    pad = torch.ones(b, t_max, dtype=torch.bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
        pad[i, : a.shape[0]] = False
    return out, pad


# ---------------------------------------------------------------------------
# step planning and input construction


@dataclass
class SequenceStepPlan:
    seq_id: str
    length: int
    plan: CorruptionPlan
    mask: MaskPlan
    mode: ModalityMode
    audio_aug: dict | None = None    # whole-utterance augmentation event

    def to_record(self) -> dict:
        return {
            "id": self.seq_id,
            "T": self.length,
            "mode": self.mode.value,
            "plan": self.plan.to_record(),
            "mask": self.mask.to_record(),
            "audio_aug": self.audio_aug,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SequenceStepPlan":
        return cls(
            seq_id=rec["id"],
            length=rec["T"],
            plan=CorruptionPlan.from_record(rec["plan"]),
            mask=MaskPlan.from_record(rec["mask"]),
            mode=ModalityMode(rec["mode"]),
            audio_aug=rec["audio_aug"],
        )


def _plan_step_sequences(
    corpus: CorpusCache, batch_ids: list[str], cfg: UptrainConfig, rng: np.random.Generator
) -> list[SequenceStepPlan]:
    out = []
    for sid in batch_ids:
        seq = corpus.sequences[sid]
        plan = sample_plan(
            seq.length, cfg.corruption, rng,
            banks=corpus.banks, bank_split=corpus.split, patch_bank=corpus.patch_bank,
        )
        audio_aug = None
        if rng.random() < cfg.clean_noise_prob and corpus.banks is not None:
            # whole-utterance 0 dB augmentation instead of chunk corruption
            plan.audio_events = []
            cats = cfg.corruption.audio_categories
            category = cats[int(rng.integers(0, len(cats)))]
            n_clips = len(corpus.banks.bank(category, corpus.split).clips)
            audio_aug = {
                "category": category,
                "clip_index": int(rng.integers(0, n_clips)),
                "snr_db": 0.0,
            }
        mask = sample_mask_plan(seq.length, cfg.mask, plan, rng)
        mode = sample_modality_mode(rng, cfg.modality_dropout)
        out.append(SequenceStepPlan(sid, seq.length, plan, mask, mode, audio_aug))
    return out


def _corrupt_audio_track(
    seq: PairedSequence, step_plan: SequenceStepPlan, corpus: CorpusCache
) -> np.ndarray:
    audio = seq.audio
    if step_plan.audio_aug is not None:
        aug = step_plan.audio_aug
        clip = corpus.banks.clip(aug["category"], corpus.split, aug["clip_index"])
        if clip.shape[0] < audio.shape[0]:
            reps = int(np.ceil(audio.shape[0] / clip.shape[0]))
            clip = np.tile(clip, (reps, 1))
        audio = mix_noise_at_snr(audio, clip[: audio.shape[0]], aug["snr_db"])
    return apply_audio(audio, step_plan.plan, corpus.banks, corpus.split)


def _build_batch(
    corpus: CorpusCache, step_plans: list[SequenceStepPlan]
) -> dict:
    seqs = [corpus.sequences[p.seq_id] for p in step_plans]
    clean_audio, pad = _collate([s.audio for s in seqs])
    clean_video, _ = _collate([s.video for s in seqs])
    corr_audio, _ = _collate(
        [_corrupt_audio_track(s, p, corpus) for s, p in zip(seqs, step_plans)]
    )
    corr_video, _ = _collate(
        [apply_video(s.video, p.plan, corpus.patch_bank) for s, p in zip(seqs, step_plans)]
    )
    b, t_max = pad.shape
    masked_a = torch.zeros(b, t_max, dtype=torch.bool)
    masked_v = torch.zeros(b, t_max, dtype=torch.bool)
    for i, p in enumerate(step_plans):
        masked_a[i, p.mask.m_audio] = True
        masked_v[i, p.mask.m_video] = True
    return {
        "clean_audio": clean_audio,
        "clean_video": clean_video,
        "corr_audio": corr_audio,
        "corr_video": corr_video,
        "pad": pad,
        "masked_a": masked_a,
        "masked_v": masked_v,
    }


# task -> (student pass, loss fn, target attribute, head)
_MAIN_PASS_TASKS = {
    "avcp": (L.avcp_loss, "av", "avcp"),
    "macp": (L.macp_loss, "a_only", "macp"),
    "mvcp": (L.mvcp_loss, "v_only", "mvcp"),
    "macp_within": (L.macp_within_loss, "a_only", "macp"),
    "mvcp_within": (L.mvcp_within_loss, "v_only", "mvcp"),
}
_VIDEO_PASS_TASKS = {
    "acp": (L.acp_loss, "a_only", "acp"),
    "vcp_within": (L.vcp_within_loss, "v_only", "vcp"),
}
_AUDIO_PASS_TASKS = {
    "vcp": (L.vcp_loss, "v_only", "vcp"),
    "acp_within": (L.acp_within_loss, "a_only", "acp"),
}


def compute_step_losses(
    model: AVModel,
    teacher: AVModel,
    codebook: np.ndarray | None,
    corpus: CorpusCache,
    step_plans: list[SequenceStepPlan],
    weights: TaskWeights,
    top_k: int,
) -> tuple[torch.Tensor | float, LossBundle]:
    """Forward passes plus the weighted objective for one step.

    Shared by the training loop and the log-replay oracle; everything is a
    pure function of the model/teacher parameters and the step plans.
    """
    batch = _build_batch(corpus, step_plans)
    active = set(weights.active())
    bundle: TargetBundle = make_targets(
        teacher,
        batch["clean_audio"],
        batch["clean_video"],
        top_k,
        codebook=codebook if "mlm" in active else None,
        key_padding_mask=batch["pad"],
    )

    acc = LossAccumulator()
    lengths = [p.length for p in step_plans]

    # main pass: corrupted + masked input, grouped by modality-dropout mode
    groups: dict[ModalityMode, list[int]] = {}
    for i, p in enumerate(step_plans):
        groups.setdefault(p.mode, []).append(i)
    for mode in _MODE_ORDER:
        idxs = groups.get(mode)
        if not idxs:
            continue
        sel = torch.as_tensor(idxs, dtype=torch.long)
        enc = model.encode(
            batch["corr_audio"][sel],
            batch["corr_video"][sel],
            mode,
            mask=(batch["masked_a"][sel], batch["masked_v"][sel]),
            key_padding_mask=batch["pad"][sel],
        )
        if "mask" in active:
            pred = model.predict_head("mask", enc.final)
            target = bundle.for_mode(mode)
            for j, i in enumerate(idxs):
                t_i = lengths[i]
                loss, count = L.masked_loss(pred[j, :t_i], target[i, :t_i], step_plans[i].mask)
                acc.add("mask", loss, count)
        if "mlm" in active:
            logits = model.predict_head("mlm", enc.final)
            for j, i in enumerate(idxs):
                t_i = lengths[i]
                loss, count = L.mlm_loss(
                    logits[j, :t_i], bundle.cluster_ids[i, :t_i], step_plans[i].mask
                )
                acc.add("mlm", loss, count)
        if mode is ModalityMode.AV:
            for task, (loss_fn, target_attr, head) in _MAIN_PASS_TASKS.items():
                if task not in active:
                    continue
                pred = model.predict_head(head, enc.final)
                target = getattr(bundle, target_attr)
                for j, i in enumerate(idxs):
                    t_i = lengths[i]
                    loss, count = loss_fn(pred[j, :t_i], target[i, :t_i], step_plans[i].plan)
                    acc.add(task, loss, count)

    # unimodal corrupted passes (no masking)
    for pass_tasks, mode in (
        (_VIDEO_PASS_TASKS, ModalityMode.VIDEO_ONLY),
        (_AUDIO_PASS_TASKS, ModalityMode.AUDIO_ONLY),
    ):
        if not (active & set(pass_tasks)):
            continue
        enc = model.encode(
            batch["corr_audio"], batch["corr_video"], mode, key_padding_mask=batch["pad"]
        )
        for task, (loss_fn, target_attr, head) in pass_tasks.items():
            if task not in active:
                continue
            pred = model.predict_head(head, enc.final)
            target = getattr(bundle, target_attr)
            for i, p in enumerate(step_plans):
                t_i = lengths[i]
                loss, count = loss_fn(pred[i, :t_i], target[i, :t_i], p.plan)
                acc.add(task, loss, count)

    return total_loss(acc.components(), weights)


def _lr_at(step: int, base_lr: float, warmup: int, total: int, exponent: float) -> float:
    """Linear warmup then polynomial decay to zero at the final step."""
    if step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base_lr * (1.0 - frac) ** exponent


# ---------------------------------------------------------------------------
# uptraining


def uptrain(
    cfg: UptrainConfig,
    model_cfg: ModelConfig,
    corpus: CorpusCache,
    out_dir: str,
    init_checkpoint: str | None = None,
) -> tuple[str, str]:
    """Corrupted representation learning; returns (checkpoint, log) paths."""
    cfg.validate()
    model_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)

    torch.manual_seed(cfg.seed)
    if init_checkpoint is not None:
        model, _, _ = load_checkpoint(init_checkpoint)
        if model.heads is None:
            model = AVModel(model_cfg, with_heads=True)
            loaded, _, _ = load_checkpoint(init_checkpoint)
            model.encoder.load_state_dict(loaded.encoder.state_dict())
    else:
        model = AVModel(model_cfg, with_heads=True)
    model.train()

    teacher = EmaTeacher(model, cfg.eta_start, cfg.eta_end, cfg.steps)

    codebook = None
    if cfg.weights.mlm > 0:
        codebook = _bootstrap_codebook(teacher.model, corpus, model_cfg, cfg.seed)

    init_path = os.path.join(out_dir, "init.ckpt")
    save_checkpoint(model, init_path, codebook=codebook, include_heads=True)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    warmup = cfg.resolved_warmup()
    lengths = {sid: corpus.sequences[sid].length for sid in corpus.ids()}
    batches = budget_batches(
        corpus.ids(), lengths, cfg.max_frames_per_batch,
        np.random.default_rng([cfg.seed, 10]),
    )

    log_path = os.path.join(out_dir, "uptrain.log.jsonl")
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            batch_ids = next(batches)
            rng = np.random.default_rng([cfg.seed, 11, step])
            step_plans = _plan_step_sequences(corpus, batch_ids, cfg, rng)

            total, bundle = compute_step_losses(
                model, teacher.model, codebook, corpus, step_plans,
                cfg.weights, model_cfg.top_k,
            )
            if not math.isfinite(bundle.total):
                raise DivergenceError(
                    f"non-finite loss at step {step}: {bundle.losses}"
                )

            lr = _lr_at(step, cfg.lr, warmup, cfg.steps, cfg.decay_exponent)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            if isinstance(total, torch.Tensor):
                total.backward()
                optimizer.step()

            # eta describes the step -> step+1 transition, reaching eta_end
            # exactly at the final update
            eta = teacher.eta_at(step + 1)
            teacher.update(model, eta)

            log.write(
                json.dumps(
                    {
                        "step": step,
                        "lr": lr,
                        "eta": eta,
                        **bundle.to_record(),
                        "sequences": [p.to_record() for p in step_plans],
                    }
                )
                + "\n"
            )

    ckpt_path = os.path.join(out_dir, "uptrained.ckpt")
    save_checkpoint(model, ckpt_path, codebook=codebook, include_heads=True)
    return ckpt_path, log_path


def _bootstrap_codebook(
    teacher: AVModel, corpus: CorpusCache, model_cfg: ModelConfig, seed: int
) -> np.ndarray:
    need = model_cfg.codebook_size * 10
    sample, frames = [], 0
    for sid in corpus.ids():
        seq = corpus.sequences[sid]
        sample.append(
            (torch.as_tensor(seq.audio), torch.as_tensor(seq.video))
        )
        frames += seq.length
        if frames >= need:
            break
    return build_codebook(
        teacher, sample, model_cfg.codebook_size, model_cfg.top_k, seed=seed
    )


def replay_step(
    init_checkpoint: str,
    log_record: dict,
    corpus: CorpusCache,
    weights: TaskWeights,
    top_k: int,
) -> LossBundle:
    """Recompute a logged step's losses from the initial checkpoint."""
    model, codebook, _ = load_checkpoint(init_checkpoint)
    teacher = EmaTeacher(model, total_steps=1)
    step_plans = [SequenceStepPlan.from_record(r) for r in log_record["sequences"]]
    _, bundle = compute_step_losses(
        model, teacher.model, codebook, corpus, step_plans, weights, top_k
    )
    return bundle


def export_for_finetuning(checkpoint_in: str, checkpoint_out: str) -> None:
    """Write a copy of the checkpoint without the self-supervised heads."""
    model, codebook, extra = load_checkpoint(checkpoint_in)
    save_checkpoint(model, checkpoint_out, codebook=codebook, include_heads=False, extra=extra)


# ---------------------------------------------------------------------------
# fine-tuning


def _finetune_plan(
    corpus: CorpusCache, batch_ids: list[str], cfg: FinetuneConfig, rng: np.random.Generator
) -> list[SequenceStepPlan]:
    out = []
    for sid in batch_ids:
        seq = corpus.sequences[sid]
        plan = sample_plan(
            seq.length, cfg.corruption, rng,
            banks=corpus.banks, bank_split=corpus.split, patch_bank=corpus.patch_bank,
        )
        audio_aug = None
        if rng.random() < cfg.audio_aug_prob and corpus.banks is not None:
            plan.audio_events = []
            cats = cfg.corruption.audio_categories
            category = cats[int(rng.integers(0, len(cats)))]
            n_clips = len(corpus.banks.bank(category, corpus.split).clips)
            audio_aug = {
                "category": category,
                "clip_index": int(rng.integers(0, n_clips)),
                "snr_db": float(rng.normal(cfg.audio_aug_snr_mean, cfg.audio_aug_snr_std)),
            }
        mask = MaskPlan()
        out.append(SequenceStepPlan(sid, seq.length, plan, mask, ModalityMode.AV, audio_aug))
    return out


def _transcript_batch(
    corpus: CorpusCache, ids: list[str], model_cfg: ModelConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forcing inputs (BOS + tokens) and labels (tokens + EOS)."""
    transcripts = [corpus.sequences[sid].transcript for sid in ids]
    s_max = max(len(t) for t in transcripts) + 1
    tokens = torch.full((len(ids), s_max), model_cfg.eos_id, dtype=torch.long)
    labels = torch.full((len(ids), s_max), -100, dtype=torch.long)
    tokens[:, 0] = model_cfg.bos_id
    for i, t in enumerate(transcripts):
        tokens[i, 1 : 1 + len(t)] = torch.as_tensor(t)
        labels[i, : len(t)] = torch.as_tensor(t)
        labels[i, len(t)] = model_cfg.eos_id
    return tokens, labels


def sequence_nll(
    model: AVModel, memory: torch.Tensor, pad: torch.Tensor,
    tokens: torch.Tensor, labels: torch.Tensor,
) -> torch.Tensor:
    logits = model.decode_logits(memory, tokens, memory_key_padding_mask=pad)
    return torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100
    )


def finetune(
    cfg: FinetuneConfig,
    model_cfg: ModelConfig,
    corpus: CorpusCache,
    out_dir: str,
    init_checkpoint: str | None = None,
) -> tuple[str, str]:
    """Supervised recognition fine-tuning; returns (checkpoint, log) paths."""
    cfg.validate()
    model_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = AVModel(model_cfg, with_heads=False, with_decoder=True)
    if init_checkpoint is not None:
        loaded, _, _ = load_checkpoint(init_checkpoint)
        model.encoder.load_state_dict(loaded.encoder.state_dict())
    model.train()

    freeze_steps = int(math.ceil(cfg.freeze_encoder_frac * cfg.steps))
    for p in model.encoder.parameters():
        p.requires_grad_(False)

    optimizer = torch.optim.AdamW(
        [
            {"params": list(model.encoder.parameters()), "lr": 0.0},
            {"params": list(model.decoder.parameters())},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    warmup = cfg.resolved_warmup()
    lengths = {sid: corpus.sequences[sid].length for sid in corpus.ids()}
    batches = budget_batches(
        corpus.ids(), lengths, cfg.max_frames_per_batch,
        np.random.default_rng([cfg.seed, 20]),
    )

    log_path = os.path.join(out_dir, "finetune.log.jsonl")
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            if step == freeze_steps:
                for p in model.encoder.parameters():
                    p.requires_grad_(True)
            encoder_frozen = step < freeze_steps

            batch_ids = next(batches)
            rng = np.random.default_rng([cfg.seed, 21, step])
            step_plans = _finetune_plan(corpus, batch_ids, cfg, rng)
            batch = _build_batch(corpus, step_plans)
            tokens, labels = _transcript_batch(corpus, batch_ids, model_cfg)

            enc = model.encode(
                batch["corr_audio"], batch["corr_video"], ModalityMode.AV,
                key_padding_mask=batch["pad"],
            )
            loss = sequence_nll(model, enc.final, batch["pad"], tokens, labels)
            if not math.isfinite(float(loss.detach())):
                raise DivergenceError(f"non-finite fine-tuning loss at step {step}")

            lr = _lr_at(step, cfg.lr, warmup, cfg.steps, cfg.decay_exponent)
            optimizer.param_groups[0]["lr"] = 0.0 if encoder_frozen else lr
            optimizer.param_groups[1]["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            log.write(
                json.dumps(
                    {
                        "step": step,
                        "lr": lr,
                        "encoder_frozen": encoder_frozen,
                        "nll": float(loss.detach()),
                        "sequences": [p.to_record() for p in step_plans],
                    }
                )
                + "\n"
            )

    ckpt_path = os.path.join(out_dir, "finetuned.ckpt")
    save_checkpoint(model, ckpt_path, include_heads=False)
    return ckpt_path, log_path


# ---------------------------------------------------------------------------
# WER


def wer(hypothesis: list, reference: list) -> float:
    """(substitutions + deletions + insertions) / |reference|."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hypothesis, reference) / len(reference)


def edit_distance(hyp: list, ref: list) -> int:
    """Minimum edit distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(
                prev[j] + 1,                      # deletion of hyp token
                cur[j - 1] + 1,                   # insertion
                prev[j - 1] + (h != r),           # substitution / match
            )
        prev = cur
    return prev[len(ref)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalCondition:
    visual_kind: str | None = None
    audio_category: str | None = None
    snr_db: float | None = None

    def label(self) -> str:
        parts = [
            self.visual_kind or "clean-video",
            self.audio_category or "clean-audio",
            "snr=-" if self.snr_db is None else f"snr={self.snr_db:g}",
        ]
        return "/".join(parts)


@dataclass
class EvalReport:
    mode: str
    seed: int
    clean_wer: float
    cells: list[dict]
    n_wer_avg: float
    n_wer_noise_dominant: float | None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def render_table(self) -> str:
        lines = []
        kinds = sorted({c["visual_kind"] or "-" for c in self.cells})
        cats = sorted({c["audio_category"] or "-" for c in self.cells})
        snrs = sorted({c["snr_db"] for c in self.cells if c["snr_db"] is not None})
        header = ["visual", "audio"] + [f"{s:g}dB" for s in snrs] + ["AVG"]
        lines.append("  ".join(f"{h:>12}" for h in header))
        for kind in kinds:
            for cat in cats:
                row = [c for c in self.cells
                       if (c["visual_kind"] or "-") == kind
                       and (c["audio_category"] or "-") == cat]
                if not row:
                    continue
                by_snr = {c["snr_db"]: c["wer"] for c in row}
                vals = [by_snr.get(s) for s in snrs]
                avg = float(np.mean([c["wer"] for c in row]))
                cells = [f"{v:12.3f}" if v is not None else " " * 12 for v in vals]
                lines.append(
                    "  ".join([f"{kind:>12}", f"{cat:>12}"] + cells + [f"{avg:12.3f}"])
                )
        lines.append(f"N-WER AVG: {self.n_wer_avg:.3f}")
        if self.n_wer_noise_dominant is not None:
            lines.append(f"N-WER (SNR<=0): {self.n_wer_noise_dominant:.3f}")
        lines.append(f"Clean WER: {self.clean_wer:.3f}")
        return "\n".join(lines)


def default_grid(
    visual_kinds=("occlude",),
    audio_categories=("babble", "speech", "music", "natural"),
    snrs=(-10.0, -5.0, 0.0, 5.0, 10.0),
) -> list[EvalCondition]:
    return [
        EvalCondition(kind, cat, snr)
        for kind in visual_kinds
        for cat in audio_categories
        for snr in snrs
    ]


def _decode_corpus_wer(
    model: AVModel,
    corpus: CorpusCache,
    mode: ModalityMode,
    audio_tracks: list[np.ndarray],
    video_tracks: list[np.ndarray],
    ids: list[str],
    max_len: int,
) -> tuple[float, int, int]:
    audio, pad = _collate(audio_tracks)
    video, _ = _collate(video_tracks)
    with torch.no_grad():
        enc = model.encode(audio, video, mode, key_padding_mask=pad)
        hyps = model.greedy_decode(enc.final, memory_key_padding_mask=pad, max_len=max_len)
    errors, ref_tokens = 0, 0
    for sid, hyp in zip(ids, hyps):
        ref = corpus.sequences[sid].transcript
        errors += edit_distance(hyp, ref)
        ref_tokens += len(ref)
    return errors / ref_tokens, errors, ref_tokens


def evaluate(
    model: AVModel,
    corpus: CorpusCache,
    grid: list[EvalCondition],
    mode: ModalityMode = ModalityMode.AV,
    seed: int = 0,
    corruption: CorruptionConfig | None = None,
    bank_split: str = "test",
) -> EvalReport:
    """Corrupt the test split per grid cell, decode greedily, report WER."""
    if not corpus.sequences:
        raise DependencyError("evaluation corpus is empty")
    base_cfg = corruption if corruption is not None else CorruptionConfig()
    for cond in grid:
        if (
            cond.audio_category in UNSEEN_NOISE_CATEGORIES
            or cond.visual_kind in UNSEEN_VISUAL_KINDS
        ) and bank_split != "test":
            raise ConfigError(
                f"unseen condition {cond.label()} requires test-split banks"
            )

    model.eval()
    ids = corpus.ids()
    seqs = [corpus.sequences[sid] for sid in ids]
    max_len = corpus.max_transcript_len() + 4

    clean_wer, _, _ = _decode_corpus_wer(
        model, corpus, mode, [s.audio for s in seqs], [s.video for s in seqs], ids, max_len
    )

    cells = []
    for cond_idx, cond in enumerate(grid):
        cell_cfg = replace(
            base_cfg,
            visual_kinds=(cond.visual_kind,) if cond.visual_kind else base_cfg.visual_kinds,
            visual_ratio_range=(
                base_cfg.visual_ratio_range if cond.visual_kind else (0.0, 0.0)
            ),
            audio_categories=(
                (cond.audio_category,) if cond.audio_category else base_cfg.audio_categories
            ),
            audio_ratio_range=(
                base_cfg.audio_ratio_range if cond.audio_category else (0.0, 0.0)
            ),
            snr_db=cond.snr_db if cond.snr_db is not None else base_cfg.snr_db,
        )
        audio_tracks, video_tracks = [], []
        for seq_idx, seq in enumerate(seqs):
            rng = np.random.default_rng([seed, cond_idx, seq_idx])
            plan = sample_plan(
                seq.length, cell_cfg, rng,
                banks=corpus.banks, bank_split=bank_split, patch_bank=corpus.patch_bank,
            )
            audio_tracks.append(apply_audio(seq.audio, plan, corpus.banks, bank_split))
            video_tracks.append(apply_video(seq.video, plan, corpus.patch_bank))
        cell_wer, errors, ref_tokens = _decode_corpus_wer(
            model, corpus, mode, audio_tracks, video_tracks, ids, max_len
        )
        cells.append(
            {
                "visual_kind": cond.visual_kind,
                "audio_category": cond.audio_category,
                "snr_db": cond.snr_db,
                "wer": cell_wer,
                "errors": errors,
                "ref_tokens": ref_tokens,
            }
        )

    n_wer_avg = float(np.mean([c["wer"] for c in cells])) if cells else float("nan")
    dominant = [c["wer"] for c in cells if c["snr_db"] is not None and c["snr_db"] <= 0]
    return EvalReport(
        mode=mode.value,
        seed=seed,
        clean_wer=clean_wer,
        cells=cells,
        n_wer_avg=n_wer_avg,
        n_wer_noise_dominant=float(np.mean(dominant)) if dominant else None,
    )
