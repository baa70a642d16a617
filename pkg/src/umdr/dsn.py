"""Decoupled spatial network: Steam stem, SMS stages and RCM recoupling.

All kernels are spatial-only (temporal size 1), so frames are folded into the
batch dimension and processed with 2-D ops; T is preserved end to end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DsnConfig:
    stem_channels: int = 32
    stages: int = 3
    widths: Sequence[int] = field(default_factory=lambda: (32, 48, 32))
    d_rcm: int = 64
    frames: int = 16  # RCM keeps one attention head per frame

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.stages not in (1, 2, 3):
            raise ValueError("stages must be 1, 2 or 3")
        if len(self.widths) < self.stages:
            raise ValueError(f"need {self.stages} stage widths, got {self.widths}")
        if any(w <= 0 or w % 8 for w in self.widths) or self.stem_channels <= 0:
            raise ValueError("widths must be positive multiples of 8")

    @property
    def out_channels(self) -> int:
        return self.widths[self.stages - 1]


class RcmOutput(NamedTuple):
    refined: torch.Tensor     # B x T x C x H x W
    excitation: torch.Tensor  # B x T, entries in (0, 1)
    attention: torch.Tensor   # B x T x C x C, row-stochastic


def _fold(x):
    B, T = x.shape[:2]
    return x.reshape(B * T, *x.shape[2:]), B, T


def _unfold(x, B, T):
    return x.reshape(B, T, *x.shape[1:])


def _norm(c, enabled=True):
    # GroupNorm with one group per 8 channels: no coupling across the batch
    return nn.GroupNorm(max(1, c // 8), c) if enabled else nn.Identity()


class ConvUnit(nn.Sequential):
    def __init__(self, cin, cout, k, stride=1, norm=True):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
            _norm(cout, norm),
            nn.ReLU(),
        )


class Steam(nn.Module):
    """Two stride-2 spatial conv stages: T x 3 x H x W -> T x C0 x H/4 x W/4."""

    def __init__(self, out_channels=32, norm=True):
        super().__init__()
        mid = max(out_channels // 2, 1)
        self.conv1 = ConvUnit(3, mid, 3, stride=2, norm=norm)
        self.conv2 = ConvUnit(mid, out_channels, 3, stride=2, norm=norm)

    def forward(self, clip):
        H, W = clip.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"frame size {H}x{W} must be divisible by 4")
        x, B, T = _fold(clip)
        return _unfold(self.conv2(self.conv1(x)), B, T)


class SMS(nn.Module):
    """Space-centric inception block followed by 2x2 spatial max-pooling."""

    def __init__(self, cin, width, norm=True):
        super().__init__()
        w1, w3, w33, wp = width // 4, width // 2, width // 8, width // 8
        self.b1 = ConvUnit(cin, w1, 1, norm=norm)
        self.b3 = nn.Sequential(ConvUnit(cin, w3, 1, norm=norm), ConvUnit(w3, w3, 3, norm=norm))
        self.b33 = nn.Sequential(ConvUnit(cin, w33, 1, norm=norm), ConvUnit(w33, w33, 3, norm=norm),
                                 ConvUnit(w33, w33, 3, norm=norm))
        self.pool = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1), ConvUnit(cin, wp, 1, norm=norm))

    def forward(self, feats):
        x, B, T = _fold(feats)
        if min(x.shape[-2:]) < 2:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} too small to pool")
        y = torch.cat([self.b1(x), self.b3(x), self.b33(x), self.pool(x)], dim=1)
        return _unfold(F.max_pool2d(y, 2), B, T)


class RCM(nn.Module):
    """Per-frame channel attention plus frame-wise excitation, with a residual.

    Each frame t owns query/key matrices W^Q_t, W^K_t of size C x d. They act
    on the frame's per-channel spatial average, giving a C x C attention map
    that re-weights the channels. A two-hidden-layer MLP over the frame means
    then yields one excitation weight per frame.
    """

    def __init__(self, channels, frames, d=64):
        super().__init__()
        self.d = d
        self.w_q = nn.Parameter(torch.randn(frames, channels, d) / math.sqrt(d))
        self.w_k = nn.Parameter(torch.randn(frames, channels, d) / math.sqrt(d))
        self.mlp = nn.Sequential(
            nn.Linear(frames, frames), nn.ReLU(),
            nn.Linear(frames, frames), nn.ReLU(),
            nn.Linear(frames, frames),
        )

    def zero_init_excitation(self):
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, feats) -> RcmOutput:
        B, T, C = feats.shape[:3]
        if T != self.w_q.shape[0] or C != self.w_q.shape[1]:
            raise ValueError(f"RCM built for T={self.w_q.shape[0]}, C={self.w_q.shape[1]}; got {T}, {C}")
        desc = feats.mean(dim=(-2, -1))                      # B x T x C
        q = desc.unsqueeze(-1) * self.w_q                     # B x T x C x d
        k = desc.unsqueeze(-1) * self.w_k
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d), dim=-1)
        flat = feats.flatten(3)                               # B x T x C x HW
        enhanced = (attn @ flat).view_as(feats)
        excitation = torch.sigmoid(self.mlp(enhanced.mean(dim=(2, 3, 4))))
        refined = excitation[:, :, None, None, None] * enhanced + feats
        return RcmOutput(refined, excitation, attn)


class DSN(nn.Module):
    def __init__(self, config: DsnConfig, norm=True):
        super().__init__()
        self.config = config
        self.steam = Steam(config.stem_channels, norm=norm)
        cin = config.stem_channels
        for i in range(config.stages):
            w = config.widths[i]
            self.add_module(f"stage{i}", nn.ModuleDict({
                "sms": SMS(cin, w, norm=norm),
                "rcm": RCM(w, config.frames, config.d_rcm),
            }))
            cin = w

    def stage(self, i) -> nn.ModuleDict:
        return getattr(self, f"stage{i}")

    def forward(self, clip):
        """clip: B x T x 3 x H x W -> (O, [W^E per stage])."""
        x = self.steam(clip)
        excitations: List[torch.Tensor] = []
        for i in range(self.config.stages):
            st = self.stage(i)
            out = st["rcm"](st["sms"](x))
            x = out.refined
            excitations.append(out.excitation)
        return x, excitations


def steam_forward(clip, steam: Steam):
    return steam(clip)


def sms_forward(feats, sms: SMS):
    return sms(feats)


def rcm_forward(feats, rcm: RCM) -> RcmOutput:
    return rcm(feats)


def dsn_forward(clip, dsn: DSN):
    return dsn(clip)
