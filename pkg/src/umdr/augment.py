"""MixUp, ShuffleMix and ShuffleMix+ for paired RGB-D clips.

Both modalities of a sample always share the partner, the mixing weight and
the temporal mask, so one soft label stays valid for either branch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data import LabeledSample, VideoClip

GEOMETRIES = ("discrete", "continuous")
GRANULARITIES = ("batch", "pair")


@dataclass
class MixParams:
    alpha_m: float = 0.8
    alpha_s: float = 0.2
    rho: float = 0.5
    mix_geometry: str = "discrete"
    granularity: str = "batch"

    def __post_init__(self):
        if self.alpha_m <= 0 or self.alpha_s <= 0:
            raise ValueError("Beta parameters must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.mix_geometry not in GEOMETRIES:
            raise ValueError(f"mix_geometry must be one of {GEOMETRIES}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")


@dataclass
class TemporalMask:
    bits: np.ndarray  # length T, {0, 1}

    @property
    def effective_rate(self) -> float:
        return float(self.bits.sum()) / len(self.bits)

    def complement(self) -> "TemporalMask":
        return TemporalMask(1 - self.bits)


@dataclass
class MixedSample(LabeledSample):
    """A mixed sample that remembers how it was made."""

    kind: str = "mixup"  # "mixup" | "shufflemix"
    partner: int = -1
    lam: float = 1.0  # lambda_m for MixUp, effective rate for ShuffleMix
    mask: Optional[TemporalMask] = None


def sample_beta(alpha: float, rng) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(rng.beta(alpha, alpha))


def _check_pair(s_i: LabeledSample, s_j: LabeledSample):
    if s_i.rgb.frames.shape != s_j.rgb.frames.shape or s_i.label.shape != s_j.label.shape:
        raise ValueError(
            f"shape mismatch: {s_i.rgb.frames.shape}/{s_i.label.shape} vs "
            f"{s_j.rgb.frames.shape}/{s_j.label.shape}"
        )


def mixup_pair(s_i: LabeledSample, s_j: LabeledSample, lambda_m: float) -> MixedSample:
    _check_pair(s_i, s_j)
    if not 0.0 <= lambda_m <= 1.0:
        raise ValueError("lambda_m must lie in [0, 1]")
    if lambda_m == 1.0:
        rgb, depth = s_i.rgb.frames.copy(), s_i.depth.frames.copy()
    else:
        lm = np.float32(lambda_m) if s_i.rgb.frames.dtype == np.float32 else lambda_m
        # clip only absorbs float rounding past the unit interval
        rgb = np.clip(lm * s_i.rgb.frames + (1 - lm) * s_j.rgb.frames, 0.0, 1.0)
        depth = np.clip(lm * s_i.depth.frames + (1 - lm) * s_j.depth.frames, 0.0, 1.0)
    label = lambda_m * s_i.label + (1.0 - lambda_m) * s_j.label
    return MixedSample(VideoClip(rgb, "rgb"), VideoClip(depth, "depth"), label,
                       kind="mixup", lam=float(lambda_m))


def make_temporal_mask(T: int, lambda_s: float, geometry: str, rng) -> TemporalMask:
    """Binary keep-mask with ``round(lambda_s * T)`` ones.

    ``discrete`` keeps a uniform random subset of frames; ``continuous``
    replaces one contiguous run of ``T - k`` frames at a uniform offset.
    """
    if T < 1:
        raise ValueError("T must be positive")
    if not 0.0 <= lambda_s <= 1.0:
        raise ValueError("lambda_s must lie in [0, 1]")
    k = int(np.floor(lambda_s * T + 0.5))  # round half up
    bits = np.zeros(T, dtype=np.int64)
    if geometry == "discrete":
        bits[rng.choice(T, size=k, replace=False)] = 1
    elif geometry == "continuous":
        bits[:] = 1
        n_zero = T - k
        off = int(rng.integers(0, T - n_zero + 1))
        bits[off:off + n_zero] = 0
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    return TemporalMask(bits)


def shufflemix_pair(s_i: LabeledSample, s_j: LabeledSample, mask: TemporalMask) -> MixedSample:
    _check_pair(s_i, s_j)
    T = s_i.rgb.T
    if len(mask.bits) != T:
        raise ValueError(f"mask length {len(mask.bits)} != T={T}")
    keep = mask.bits.astype(bool)
    other = mask.complement().bits.astype(bool)
    rgb = np.empty_like(s_i.rgb.frames)
    depth = np.empty_like(s_i.depth.frames)
    rgb[keep], rgb[other] = s_i.rgb.frames[keep], s_j.rgb.frames[other]
    depth[keep], depth[other] = s_i.depth.frames[keep], s_j.depth.frames[other]
    lam = mask.effective_rate
    label = lam * s_i.label + (1.0 - lam) * s_j.label
    return MixedSample(VideoClip(rgb, "rgb"), VideoClip(depth, "depth"), label,
                       kind="shufflemix", lam=lam, mask=mask)


def partner_permutation(n: int, rng) -> np.ndarray:
    """Random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("need at least two samples to pair")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shufflemix_plus(batch: Sequence[LabeledSample], params: MixParams, rng) -> List[MixedSample]:
    if len(batch) < 2:
        raise ValueError("ShuffleMix+ needs a batch of at least two samples")
    perm = partner_permutation(len(batch), rng)
    use_shuffle_batch = params.granularity == "batch" and params.rho > rng.random()
    out = []
    for i, j in enumerate(perm):
        if params.granularity == "pair":
            use_shuffle = params.rho > rng.random()
        else:
            use_shuffle = use_shuffle_batch
        if use_shuffle:
            lam = sample_beta(params.alpha_s, rng)
            mask = make_temporal_mask(batch[i].rgb.T, lam, params.mix_geometry, rng)
            m = shufflemix_pair(batch[i], batch[j], mask)
        else:
            m = mixup_pair(batch[i], batch[j], sample_beta(params.alpha_m, rng))
        m.partner = int(j)
        out.append(m)
    return out
