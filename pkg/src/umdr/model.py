"""Unimodal network: DSN -> spatial pooling -> DTN, with the recoupling maps."""
from __future__ import annotations

import math
from typing import List, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dsn import DSN, DsnConfig
from .dtn import DTN, DtnConfig, pool_spatial
from .objectives import RecouplingInputs


def stage_depths(stages: int, blocks: int) -> List[int]:
    """0-based MTrans block index paired with each RCM stage (block ceil(l*blocks/L))."""
    return [math.ceil(l * blocks / stages) - 1 for l in range(1, stages + 1)]


class UnimodalOutput(NamedTuple):
    fused_logits: torch.Tensor
    branch_logits: List[torch.Tensor]
    cls_tokens: List[List[torch.Tensor]]
    excitations: List[torch.Tensor]
    spatial: torch.Tensor  # pooled DSN output, B x T x C


class UMDRNet(nn.Module):
    def __init__(self, dsn_cfg: DsnConfig, dtn_cfg: DtnConfig):
        super().__init__()
        self.dsn = DSN(dsn_cfg)
        self.dtn = DTN(dsn_cfg.frames, dsn_cfg.out_channels, dtn_cfg)
        self.depths = stage_depths(dsn_cfg.stages, dtn_cfg.blocks)
        self.token_dim = self.dtn.specs[self.dtn.moderate_index].channels
        # one linear map per stage, R^T -> R^{D_moderate}
        self.distill = nn.ModuleDict({
            f"stage{l}": nn.Linear(dsn_cfg.frames, self.token_dim) for l in range(dsn_cfg.stages)
        })

    def forward(self, clip, tau, rng=None) -> UnimodalOutput:
        O, excitations = self.dsn(clip)
        pooled = pool_spatial(O)
        out = self.dtn(pooled, tau, rng)
        return UnimodalOutput(out.fused_logits, out.branch_logits, out.cls_tokens,
                              excitations, pooled)

    def summed_class_token(self, cls_tokens, depth: int):
        """Sum of all branches' class tokens at one depth, each resized to the moderate width.

        Resizing is a fixed adaptive average over the channel axis (no parameters).
        """
        total = 0
        for branch_tokens in cls_tokens:
            tok = branch_tokens[depth]
            if tok.shape[-1] != self.token_dim:
                tok = F.adaptive_avg_pool1d(tok.unsqueeze(1), self.token_dim).squeeze(1)
            total = total + tok
        return total

    def recoupling_inputs(self, out: UnimodalOutput) -> RecouplingInputs:
        teachers = [self.summed_class_token(out.cls_tokens, d).detach() for d in self.depths]
        students = [self.distill[f"stage{l}"](we) for l, we in enumerate(out.excitations)]
        return RecouplingInputs(teachers, students)

    def final_class_tokens(self, out: UnimodalOutput):
        """Concatenated last-block class tokens of all branches, B x sum(D_i)."""
        return torch.cat([tk[-1] for tk in out.cls_tokens], dim=-1)
