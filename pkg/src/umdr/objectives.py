"""Training objectives: soft-target CE, recoupling self-distillation, total loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_d: float = 0.2
    distill_T: float = 4.0
    branch_weight: float = 1.0
    t2_scaling: bool = True

    def __post_init__(self):
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be non-negative")
        if self.distill_T <= 0:
            raise ValueError("distill_T must be positive")


def soft_cross_entropy(logits, target):
    """Mean over the batch of ``-sum_c target_c * log_softmax(logits)_c``."""
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    loss = -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1)
    return loss.mean() if loss.dim() else loss


def kl_softened(teacher, student, temperature: float, t2_scaling: bool = True):
    """Batch-mean KL(softmax(teacher / T) || softmax(student / T)); teacher is detached."""
    p_log = F.log_softmax(teacher.detach() / temperature, dim=-1)
    q_log = F.log_softmax(student / temperature, dim=-1)
    kl = (p_log.exp() * (p_log - q_log)).sum(dim=-1)
    kl = kl.mean() if kl.dim() else kl
    return kl * temperature ** 2 if t2_scaling else kl


class RecouplingInputs(NamedTuple):
    teachers: Sequence[torch.Tensor]  # per stage: summed class tokens, B x D
    students: Sequence[torch.Tensor]  # per stage: mapped excitations, B x D


def distill_loss(inputs: RecouplingInputs, temperature: float = 4.0, t2_scaling: bool = True):
    L = len(inputs.teachers)
    if L < 1 or L != len(inputs.students):
        raise ValueError("need matching, non-empty teacher and student lists")
    total = 0.0
    for t, s in zip(inputs.teachers, inputs.students):
        if t.shape != s.shape:
            raise ValueError(f"teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        total = total + kl_softened(t, s, temperature, t2_scaling)
    return total / L


def total_loss(ce_fused, per_branch_ces, distill, weights: LossWeights):
    entropy = ce_fused
    for ce in per_branch_ces:
        entropy = entropy + weights.branch_weight * ce
    return entropy + weights.lambda_d * distill
