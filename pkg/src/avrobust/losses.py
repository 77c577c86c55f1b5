"""Task losses and the weighted multi-task objective.

Regression tasks use per-frame mean squared error against normalized teacher
targets, averaged over contributing frames and feature dimensions; the
cluster-prediction task uses cross-entropy. Each task reads from a specific
index set:

    mask        masked frames (audio or video), masked multimodal input
    avcp        corrupted frames (audio or video), corrupted multimodal input
    acp         video-corrupted frames, video-only input, audio targets
    vcp         audio-corrupted frames, audio-only input, video targets
    macp/mvcp   as acp/vcp but with multimodal input
    *_within    same-modality variants: the corrupted input modality is also
                the target modality
    mlm         masked frames, cluster-index targets

A task with no contributing frames reports loss 0 with count 0. The total is
the weighted sum of the requested components.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .corruption import CorruptionPlan
from .errors import ConfigError
from .masking import MaskPlan


@dataclass
class TaskWeights:
    mask: float = 1.0
    mlm: float = 2.0
    acp: float = 1.0
    vcp: float = 1.0
    avcp: float = 0.0
    macp: float = 0.0
    mvcp: float = 0.0
    acp_within: float = 0.0
    vcp_within: float = 0.0
    macp_within: float = 0.0
    mvcp_within: float = 0.0

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"task weight {f.name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def active(self) -> list[str]:
        return [name for name, lam in self.as_dict().items() if lam > 0]


# the full task-configuration ablation grid (the masked and cluster
# prediction tasks stay on in every row)
ABLATION_GRID: list[dict[str, float]] = [
    {"avcp": 1.0},
    {"macp": 1.0, "mvcp": 1.0},
    {"macp_within": 1.0, "mvcp_within": 1.0},
    {"macp": 1.0, "mvcp": 1.0, "avcp": 1.0},
    {"acp": 1.0, "vcp": 1.0},
    {"acp_within": 1.0, "vcp_within": 1.0},
    {"acp": 1.0, "vcp": 1.0, "acp_within": 1.0},
    {"acp": 1.0, "vcp": 1.0, "vcp_within": 1.0},
    {"acp": 1.0, "vcp": 1.0, "acp_within": 1.0, "vcp_within": 1.0},
    {"acp": 1.0, "vcp": 1.0, "avcp": 1.0},
    {"macp": 1.0, "mvcp": 1.0, "acp": 1.0, "vcp": 1.0},
    {
        "macp_within": 1.0,
        "mvcp_within": 1.0,
        "acp_within": 1.0,
        "vcp_within": 1.0,
    },
]


def ablation_weights(row: dict[str, float]) -> TaskWeights:
    w = TaskWeights(acp=0.0, vcp=0.0)
    for task, lam in row.items():
        if task not in w.as_dict():
            raise ConfigError(f"unknown task {task!r} in ablation row")
        setattr(w, task, lam)
    return w


@dataclass
class LossBundle:
    losses: dict[str, float]
    counts: dict[str, int]
    total: float
    weights: dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "losses": self.losses,
            "counts": self.counts,
            "total": self.total,
            "weights": self.weights,
        }


def _frame_mse(
    pred: torch.Tensor, target: torch.Tensor, indices: np.ndarray | torch.Tensor
) -> tuple[torch.Tensor, int]:
    if pred.shape != target.shape:
        raise ValueError(f"pred/target shape mismatch: {pred.shape} vs {target.shape}")
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.long, device=pred.device)
    if idx.numel() == 0:
        return pred.new_zeros(()), 0
    if int(idx.max()) >= pred.shape[0]:
        raise ValueError("loss index out of range")
    return F.mse_loss(pred[idx], target[idx]), int(idx.numel())


def _union(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.union1d(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))


def masked_loss(pred, target, mask: MaskPlan):
    """MSE at masked frames of either modality."""
    return _frame_mse(pred, target, _union(mask.m_audio, mask.m_video))


def avcp_loss(pred, target, plan: CorruptionPlan):
    """MSE at corrupted frames of either modality, multimodal input/target."""
    return _frame_mse(pred, target, _union(plan.c_audio, plan.c_video))


def acp_loss(pred, target, plan: CorruptionPlan):
    """Video-corrupted frames, audio targets (cross-modal)."""
    return _frame_mse(pred, target, plan.c_video)


def vcp_loss(pred, target, plan: CorruptionPlan):
    """Audio-corrupted frames, video targets (cross-modal)."""
    return _frame_mse(pred, target, plan.c_audio)


def macp_loss(pred, target, plan: CorruptionPlan):
    return _frame_mse(pred, target, plan.c_video)


def mvcp_loss(pred, target, plan: CorruptionPlan):
    return _frame_mse(pred, target, plan.c_audio)


def acp_within_loss(pred, target, plan: CorruptionPlan):
    """Audio-corrupted frames, audio targets (within-modal)."""
    return _frame_mse(pred, target, plan.c_audio)


def vcp_within_loss(pred, target, plan: CorruptionPlan):
    """Video-corrupted frames, video targets (within-modal)."""
    return _frame_mse(pred, target, plan.c_video)


def macp_within_loss(pred, target, plan: CorruptionPlan):
    return _frame_mse(pred, target, plan.c_audio)


def mvcp_within_loss(pred, target, plan: CorruptionPlan):
    return _frame_mse(pred, target, plan.c_video)


def mlm_loss(logits, cluster_ids, mask: MaskPlan):
    """Cross-entropy of cluster indices at masked frames."""
    if cluster_ids is None:
        raise RuntimeError("cluster targets requested but no codebook was built")
    idx_np = _union(mask.m_audio, mask.m_video)
    idx = torch.as_tensor(idx_np, dtype=torch.long, device=logits.device)
    if idx.numel() == 0:
        return logits.new_zeros(()), 0
    if int(idx.max()) >= logits.shape[0]:
        raise ValueError("loss index out of range")
    return F.cross_entropy(logits[idx], cluster_ids[idx]), int(idx.numel())


class LossAccumulator:
    """Frame-weighted aggregation of per-sequence (loss, count) pairs."""

    def __init__(self):
        self._terms: dict[str, list[tuple[torch.Tensor, int]]] = {}

    def add(self, task: str, loss: torch.Tensor, count: int) -> None:
        if count > 0:
            self._terms.setdefault(task, []).append((loss, count))
        else:
            self._terms.setdefault(task, [])

    def components(self) -> dict[str, tuple[torch.Tensor | float, int]]:
        out: dict[str, tuple[torch.Tensor | float, int]] = {}
        for task, terms in self._terms.items():
            total_count = sum(c for _, c in terms)
            if total_count == 0:
                out[task] = (0.0, 0)
            else:
                weighted = sum(loss * c for loss, c in terms) / total_count
                out[task] = (weighted, total_count)
        return out


def total_loss(
    components: dict[str, tuple[torch.Tensor | float, int]], weights: TaskWeights
) -> tuple[torch.Tensor | float, LossBundle]:
    """Weighted sum of the computed components.

    Raises ConfigError when a positively weighted task has no computed
    component. Returns the differentiable total (if any component is a
    tensor) together with a detached LossBundle for logging.
    """
    weights.validate()
    lams = weights.as_dict()
    for task, lam in lams.items():
        if lam > 0 and task not in components:
            raise ConfigError(f"weight for task {task!r} is {lam} but it was not computed")

    total: torch.Tensor | float = 0.0
    losses, counts = {}, {}
    for task, (loss, count) in components.items():
        lam = lams.get(task, 0.0)
        value = loss if isinstance(loss, torch.Tensor) else torch.as_tensor(float(loss))
        losses[task] = float(value.detach())
        counts[task] = int(count)
        if lam > 0:
            total = total + lam * loss
    bundle = LossBundle(
        losses=losses,
        counts=counts,
        total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total),
        weights=lams,
    )
    return total, bundle
