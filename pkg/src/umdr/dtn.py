"""Decoupled temporal network: sampling layer, TMS, kNN-attention MTrans, multi-branch head."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BranchSpec:
    name: str
    frames: int
    channels: int


@dataclass
class DtnConfig:
    n_branches: int = 3
    blocks: int = 6
    heads: int = 4
    knn_ratio: float = 0.7
    num_classes: int = 8
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.knn_ratio <= 1.0:
            raise ValueError("knn_ratio must lie in (0, 1]")
        if not 1 <= self.n_branches <= 3:
            raise ValueError("n_branches must be 1, 2 or 3")
        if self.blocks < 1:
            raise ValueError("need at least one MTrans block")


def default_branches(T: int, C: int, n: int = 3) -> List[BranchSpec]:
    """fast (T/2, 3C/2), moderate (T, C), slow (3T/2, C/2); ``n`` < 3 keeps the first ones
    in the order moderate, fast, slow."""
    specs = {
        "moderate": BranchSpec("moderate", T, C),
        "fast": BranchSpec("fast", max(1, T // 2), 3 * C // 2),
        "slow": BranchSpec("slow", 3 * T // 2, max(1, C // 2)),
    }
    order = ["moderate", "fast", "slow"][:n]
    return [specs[k] for k in ("fast", "moderate", "slow") if k in order]


# ---------------------------------------------------------------------------
# sampling layer


def subsequence_indices(T: int, T_i: int, rng=None) -> np.ndarray:
    """1-based frame indices for one branch.

    Index t draws from ``[s*t - 1, s*t]`` with ``s = ceil(T / T_i)``, clamped to
    ``[1, T]``. When ``T_i <= T`` each draw is further limited to values above the
    previous index and low enough to leave room for the later windows, so the
    sequence is strictly increasing wherever the clamped windows allow it.
    Without ``rng`` the upper end of the allowed range is used.
    """
    if T_i <= 0:
        raise ValueError("T_i must be positive")
    if T < 1:
        raise ValueError("T must be positive")
    s = -(-T // T_i)
    t_all = np.arange(1, T_i + 1)
    lows = np.clip(s * t_all - 1, 1, T)
    highs = np.clip(s * t_all, 1, T)
    # latest value each step may take so later windows still fit above it
    latest = highs.copy()
    for t in range(T_i - 2, -1, -1):
        latest[t] = max(lows[t], min(highs[t], latest[t + 1] - 1))
    out = np.empty(T_i, dtype=np.int64)
    prev = 0
    strict = T_i <= T
    for t in range(1, T_i + 1):
        lo, hi = int(lows[t - 1]), int(highs[t - 1])
        if strict:
            hi = int(latest[t - 1])
            lo = max(lo, min(prev + 1, hi))
        if rng is None:
            idx = hi
        else:
            idx = int(rng.integers(lo, hi + 1))
        out[t - 1] = idx
        prev = idx
    return out


def sample_subsequence(seq, T_i: int, rng=None):
    """Gather a T_i-long subsequence along dim -2 of ``seq`` (... x T x C)."""
    idx = subsequence_indices(seq.shape[-2], T_i, rng) - 1
    if isinstance(seq, np.ndarray):
        return seq[..., idx, :]
    return seq[..., torch.as_tensor(idx, device=seq.device), :]


def pool_spatial(feats):
    """... x T x C x H x W -> ... x T x C (spatial mean)."""
    return feats.mean(dim=(-2, -1))


# ---------------------------------------------------------------------------
# TMS


def tms_kernel(T_i: int) -> int:
    return math.isqrt(T_i - 1) + 1 if T_i > 1 else 1  # ceil(sqrt(T_i))


class TemporalConv(nn.Module):
    """Same-length 1-D conv over time; even kernels pad one extra step on the right."""

    def __init__(self, cin, cout, k):
        super().__init__()
        self.k = k
        self.conv = nn.Conv1d(cin, cout, k, bias=False)

    def forward(self, x):  # B x C x T
        left = (self.k - 1) // 2
        return self.conv(F.pad(x, (left, self.k - 1 - left)))


class TMS(nn.Module):
    """Time-centric inception (kernels 1 and k) and a stride-1 temporal max-pool."""

    def __init__(self, channels, frames):
        super().__init__()
        self.k = tms_kernel(frames)
        c1, ck, cp = channels // 2, channels // 4, channels - channels // 2 - channels // 4
        self.b1 = nn.Sequential(TemporalConv(channels, c1, 1), nn.GroupNorm(1, c1), nn.ReLU())
        self.bk = nn.Sequential(TemporalConv(channels, ck, 1), nn.ReLU(),
                                TemporalConv(ck, ck, self.k), nn.GroupNorm(1, ck), nn.ReLU())
        self.bp = nn.Sequential(nn.MaxPool1d(3, stride=1, padding=1),
                                TemporalConv(channels, cp, 1), nn.GroupNorm(1, cp), nn.ReLU())

    def forward(self, seq):  # B x T x C
        x = seq.transpose(1, 2)
        y = torch.cat([self.b1(x), self.bk(x), self.bp(x)], dim=1)
        y = F.max_pool1d(y, 3, stride=1, padding=1)
        return y.transpose(1, 2)


def tms_forward(seq, tms: TMS):
    return tms(seq)


# ---------------------------------------------------------------------------
# kNN attention and MTrans


def knn_count(n_tokens: int, ratio: float) -> int:
    # round() guards against 0.7 * 10 = 7.000000000000001
    return max(1, min(n_tokens, math.ceil(round(ratio * n_tokens, 9))))


def knn_attention_weights(q, k, knn_ratio: float):
    """Softmax over the top ``ceil(ratio * n)`` scores of each query row.

    Ties resolve to the lowest key index.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    n = scores.shape[-1]
    m = knn_count(n, knn_ratio)
    if m < n:
        order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
        keep = torch.zeros_like(scores, dtype=torch.bool).scatter_(-1, order[..., :m], True)
        scores = scores.masked_fill(~keep, float("-inf"))
    return torch.softmax(scores, dim=-1)


def knn_attention(q, k, v, knn_ratio: float):
    return knn_attention_weights(q, k, knn_ratio) @ v


class KnnMSA(nn.Module):
    def __init__(self, dim, heads, knn_ratio):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads, self.knn_ratio = heads, knn_ratio
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = knn_attention_weights(q, k, self.knn_ratio)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class MTransBlock(nn.Module):
    """x <- x + LN(MSA_kNN(x)); x <- x + LN(FFN(x))."""

    def __init__(self, dim, heads=4, knn_ratio=0.7, mlp_ratio=2.0):
        super().__init__()
        self.attn = KnnMSA(dim, heads, knn_ratio)
        self.norm1 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.norm2 = nn.LayerNorm(dim)

    def zero_init_outputs(self):
        for lin in (self.attn.proj, self.ffn[-1]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, z):
        z = self.norm1(self.attn(z)) + z
        return self.norm2(self.ffn(z)) + z


def mtrans_block(seq, block: MTransBlock):
    return block(seq)


# ---------------------------------------------------------------------------
# branches


def make_head(dim, num_classes) -> nn.Linear:
    """Bias-free linear head, zero-initialized so every branch starts at uniform logits.

    Its input is the unit-norm class token divided by tau, so the input norm is
    fixed at 1/tau and the effective head step size does not depend on depth or width.
    """
    head = nn.Linear(dim, num_classes, bias=False)
    nn.init.zeros_(head.weight)
    return head


class Branch(nn.Module):
    def __init__(self, spec: BranchSpec, in_channels: int, cfg: DtnConfig):
        super().__init__()
        self.spec = spec
        D = spec.channels
        self.proj = nn.Linear(in_channels, D, bias=False)
        self.tms = TMS(D, spec.frames)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.frames + 1, D))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for l in range(cfg.blocks):
            self.add_module(f"block{l}", MTransBlock(D, cfg.heads, cfg.knn_ratio, cfg.mlp_ratio))
        self.n_blocks = cfg.blocks
        self.head = make_head(D, cfg.num_classes)

    def block(self, l) -> MTransBlock:
        return getattr(self, f"block{l}")

    def forward(self, pooled, tau, rng=None):
        """pooled: B x T x C. Returns (logits, [class token after each block])."""
        x = sample_subsequence(pooled, self.spec.frames, rng)
        x = self.tms(self.proj(x))
        z = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        tokens = []
        for l in range(self.n_blocks):
            z = self.block(l)(z)
            tokens.append(z[:, 0])
        cls = F.normalize(z[:, 0], dim=-1)
        return self.head(cls / tau), tokens


class DtnOutput(NamedTuple):
    fused_logits: torch.Tensor
    branch_logits: List[torch.Tensor]
    cls_tokens: List[List[torch.Tensor]]  # [branch][block] -> B x D_i


class DTN(nn.Module):
    def __init__(self, frames: int, in_channels: int, cfg: DtnConfig):
        super().__init__()
        self.cfg = cfg
        self.specs = default_branches(frames, in_channels, cfg.n_branches)
        for i, spec in enumerate(self.specs):
            self.add_module(f"branch{i}", Branch(spec, in_channels, cfg))

    def branch(self, i) -> Branch:
        return getattr(self, f"branch{i}")

    @property
    def moderate_index(self) -> int:
        names = [s.name for s in self.specs]
        return names.index("moderate")

    def forward(self, pooled, tau, rng=None) -> DtnOutput:
        if tau <= 0:
            raise ValueError("tau must be positive")
        logits, tokens = [], []
        for i in range(len(self.specs)):
            lg, tk = self.branch(i)(pooled, tau, rng)
            logits.append(lg)
            tokens.append(tk)
        fused = logits[0]
        for lg in logits[1:]:
            fused = fused + lg
        return DtnOutput(fused, logits, tokens)


def dtn_forward(pooled, dtn: DTN, tau, rng=None) -> DtnOutput:
    return dtn(pooled, tau, rng)


def tau_schedule(epoch, total_epochs, start=0.04, end=0.07) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch out of range")
    return end - (end - start) * (1 + math.cos(math.pi * epoch / total_epochs)) / 2
