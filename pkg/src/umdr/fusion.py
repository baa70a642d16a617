"""Late fusion of the rgb and depth networks: score addition/multiplication and CFCer.

CFCer (cross-modal complementary feature extraction) gates each modality's
tokens with both modalities' context, then lets the other modality query it.
The resulting complementary features get their own classifiers, whose scores
join the two unimodal scores.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .objectives import soft_cross_entropy
from .tensor_io import read_tensor, write_tensor
from .train import (Checkpoint, SplitData, load_checkpoint, model_from_checkpoint, sgd_step,
                    top1)

log = logging.getLogger(__name__)

STRATEGIES = ("add", "mul", "cfcer")


# ---------------------------------------------------------------------------
# score baselines


def _as_list(scores):
    return [torch.as_tensor(s) for s in scores]


def fuse_add(*scores):
    """Elementwise sum of score vectors (or batches of them)."""
    scores = _as_list(scores)
    if len(scores) < 2:
        raise ValueError("need at least two score lists")
    if any(s.shape != scores[0].shape for s in scores):
        raise ValueError(f"score shapes differ: {[tuple(s.shape) for s in scores]}")
    out = scores[0]
    for s in scores[1:]:
        out = out + s
    return out


def fuse_mul(*scores):
    """Elementwise product of score vectors."""
    scores = _as_list(scores)
    if len(scores) < 2:
        raise ValueError("need at least two score lists")
    if any(s.shape != scores[0].shape for s in scores):
        raise ValueError(f"score shapes differ: {[tuple(s.shape) for s in scores]}")
    out = scores[0]
    for s in scores[1:]:
        out = out * s
    return out


# ---------------------------------------------------------------------------
# CFCer


@dataclass
class CfcerConfig:
    d: int = 64
    spatial_layers: int = 2
    temporal_layers: int = 4
    mlp_ratio: float = 1.0

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.spatial_layers < 0 or self.temporal_layers < 0:
            raise ValueError("stack sizes must be >= 0")


class CfcerLayer(nn.Module):
    """One CFCer: per-modality enhancement gate followed by cross-modal attention.

    Inputs are token sequences ... x N x C for each modality; outputs are
    ... x N x d complementary features for each modality.
    """

    def __init__(self, channels, d=64, mlp_ratio=1.0):
        super().__init__()
        self.d = d
        hidden = max(1, int(round(channels * mlp_ratio)))
        self.norm = nn.LayerNorm(2 * channels)
        self.mlp_r = nn.Sequential(nn.Linear(2 * channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.mlp_d = nn.Sequential(nn.Linear(2 * channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        # color direction: depth queries color; depth direction: color queries depth
        self.q_r, self.k_r, self.v_r = (nn.Linear(channels, d, bias=False) for _ in range(3))
        self.q_d, self.k_d, self.v_d = (nn.Linear(channels, d, bias=False) for _ in range(3))

    def zero_init_gates(self):
        for mlp in (self.mlp_r, self.mlp_d):
            nn.init.zeros_(mlp[-1].weight)
            nn.init.zeros_(mlp[-1].bias)

    def enhance(self, o_r, o_d):
        if o_r.shape != o_d.shape:
            raise ValueError(f"modality shapes differ: {tuple(o_r.shape)} vs {tuple(o_d.shape)}")
        ctx = self.norm(torch.cat([o_r, o_d], dim=-1))
        return torch.sigmoid(self.mlp_r(ctx)) * o_r, torch.sigmoid(self.mlp_d(ctx)) * o_d

    def cross(self, e_r, e_d):
        a_r = cross_attention(self.q_d(e_d), self.k_r(e_r), self.d)
        a_d = cross_attention(self.q_r(e_r), self.k_d(e_d), self.d)
        self.last_attention = (a_r.detach(), a_d.detach())
        return a_r @ self.v_r(e_r), a_d @ self.v_d(e_d)

    def forward(self, o_r, o_d):
        return self.cross(*self.enhance(o_r, o_d))


def cross_attention(q, k, d):
    """Row-stochastic softmax(q k^T / sqrt(d)), ... x N x N."""
    if q.shape[-2] != k.shape[-2]:
        raise ValueError("token counts differ")
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)


def cfcer_enhance(o_r, o_d, layer: CfcerLayer):
    return layer.enhance(o_r, o_d)


def cfcer_cross(e_r, e_d, layer: CfcerLayer):
    return layer.cross(e_r, e_d)


class UnimodalOutputs(NamedTuple):
    spatial: torch.Tensor     # N x T x C pooled DSN features
    cls_token: torch.Tensor   # N x D concatenated final class tokens
    logits: torch.Tensor      # N x C_cls


class FusionOutput(NamedTuple):
    score: torch.Tensor       # N x C_cls, sum of four softmax scores
    comp_r: torch.Tensor      # N x d color-oriented complementary features
    comp_d: torch.Tensor
    comp_logits: tuple


class CfcerFusion(nn.Module):
    """Spatial CFCers on frame tokens, then temporal CFCers on [pooled, class token] pairs."""

    def __init__(self, channels: int, token_dim: int, num_classes: int, cfg: CfcerConfig = None):
        super().__init__()
        cfg = cfg or CfcerConfig()
        self.cfg = cfg
        self.channels, self.token_dim = channels, token_dim
        d = cfg.d
        widths = [channels] + [d] * cfg.spatial_layers
        self.spatial = nn.ModuleList(CfcerLayer(widths[i], d, cfg.mlp_ratio) for i in range(cfg.spatial_layers))
        w = widths[-1]
        self.cls_proj_r = nn.Linear(token_dim, w)
        self.cls_proj_d = nn.Linear(token_dim, w)
        self.temporal = nn.ModuleList(CfcerLayer(w if i == 0 else d, d, cfg.mlp_ratio)
                                      for i in range(cfg.temporal_layers))
        # per-layer input LayerNorm for each modality; without it the 0.5-ish gates
        # and value projections shrink activations geometrically through the stack
        in_widths = widths[:-1] + [w if i == 0 else d for i in range(cfg.temporal_layers)]
        self.in_norm_r = nn.ModuleList(nn.LayerNorm(c) for c in in_widths)
        self.in_norm_d = nn.ModuleList(nn.LayerNorm(c) for c in in_widths)
        out_w = d if cfg.temporal_layers else w
        self.head_r = nn.Linear(out_w, num_classes)
        self.head_d = nn.Linear(out_w, num_classes)

    def layers(self) -> List[CfcerLayer]:
        return list(self.spatial) + list(self.temporal)

    def complementary(self, rgb: UnimodalOutputs, depth: UnimodalOutputs):
        x_r, x_d = rgb.spatial, depth.spatial
        n_sp = len(self.spatial)
        for i, layer in enumerate(self.spatial):
            x_r, x_d = layer(self.in_norm_r[i](x_r), self.in_norm_d[i](x_d))
        # two-token sequence per modality: [pooled spatial feature, class token]
        x_r = torch.stack([x_r.mean(dim=-2), self.cls_proj_r(rgb.cls_token)], dim=-2)
        x_d = torch.stack([x_d.mean(dim=-2), self.cls_proj_d(depth.cls_token)], dim=-2)
        for i, layer in enumerate(self.temporal):
            x_r, x_d = layer(self.in_norm_r[n_sp + i](x_r), self.in_norm_d[n_sp + i](x_d))
        return x_r.mean(dim=-2), x_d.mean(dim=-2)

    def forward(self, rgb: UnimodalOutputs, depth: UnimodalOutputs, ablate: bool = False) -> FusionOutput:
        return fusion_forward(rgb, depth, self, ablate)


def fusion_forward(rgb: UnimodalOutputs, depth: UnimodalOutputs, model: CfcerFusion,
                   ablate: bool = False) -> FusionOutput:
    """Sum of softmax scores: rgb + depth + both complementary heads.

    ``ablate`` drops the complementary heads, leaving fuse_add of the unimodal scores.
    """
    if rgb.logits is None or depth.logits is None:
        raise ValueError("missing unimodal logits")
    base = fuse_add(torch.softmax(rgb.logits, -1), torch.softmax(depth.logits, -1))
    comp_r, comp_d = model.complementary(rgb, depth)
    lg_r, lg_d = model.head_r(comp_r), model.head_d(comp_d)
    if ablate:
        return FusionOutput(base, comp_r, comp_d, (lg_r, lg_d))
    score = base + torch.softmax(lg_r, -1) + torch.softmax(lg_d, -1)
    return FusionOutput(score, comp_r, comp_d, (lg_r, lg_d))


# ---------------------------------------------------------------------------
# unimodal feature extraction


@torch.no_grad()
def unimodal_outputs(ckpt: Checkpoint, clips: np.ndarray, batch_size: int = 64) -> UnimodalOutputs:
    """Frozen forward pass of a unimodal checkpoint at its final tau."""
    model = model_from_checkpoint(ckpt)
    model.eval()
    sp, tok, lg = [], [], []
    for i in range(0, len(clips), batch_size):
        out = model(torch.from_numpy(clips[i:i + batch_size]), ckpt.tau)
        sp.append(out.spatial)
        tok.append(model.final_class_tokens(out))
        lg.append(out.fused_logits)
    return UnimodalOutputs(torch.cat(sp), torch.cat(tok), torch.cat(lg))


def _index(u: UnimodalOutputs, idx) -> UnimodalOutputs:
    return UnimodalOutputs(u.spatial[idx], u.cls_token[idx], u.logits[idx])


def baseline_scores(rgb: UnimodalOutputs, depth: UnimodalOutputs, strategy: str):
    p_r, p_d = torch.softmax(rgb.logits, -1), torch.softmax(depth.logits, -1)
    if strategy == "add":
        return fuse_add(p_r, p_d)
    if strategy == "mul":
        return fuse_mul(p_r, p_d)
    raise ValueError(f"unknown baseline strategy {strategy!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class FusionResult:
    model: Optional[CfcerFusion]
    strategy: str
    metrics: List[dict] = field(default_factory=list)
    val_top1: float = float("nan")
    unimodal_val_top1: Dict[str, float] = field(default_factory=dict)


def _load(ckpt):
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def train_fusion(rgb_ckpt, depth_ckpt, train_data: SplitData, val_data: Optional[SplitData] = None,
                 strategy: str = "cfcer", epochs: Optional[int] = None, seed: Optional[int] = None,
                 cfg: Optional[RunConfig] = None, cfcer_cfg: Optional[CfcerConfig] = None,
                 deterministic: bool = True) -> FusionResult:
    """Fuse two frozen unimodal checkpoints.

    Unimodal features are computed once; only CFCer parameters and heads train,
    with soft cross-entropy on the normalized four-stream score.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if deterministic:
        torch.set_num_threads(1)
    rgb_ckpt, depth_ckpt = _load(rgb_ckpt), _load(depth_ckpt)
    cfg = cfg or rgb_ckpt.config
    epochs = cfg.fuse_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    if rgb_ckpt.config.dtn.num_classes != depth_ckpt.config.dtn.num_classes:
        raise ValueError("rgb and depth checkpoints disagree on the class count")

    tr_r, tr_d = unimodal_outputs(rgb_ckpt, train_data.rgb), unimodal_outputs(depth_ckpt, train_data.depth)
    va = None
    uni = {}
    if val_data is not None and len(val_data):
        va = unimodal_outputs(rgb_ckpt, val_data.rgb), unimodal_outputs(depth_ckpt, val_data.depth)
        uni = {"rgb": top1(va[0].logits, val_data.labels), "depth": top1(va[1].logits, val_data.labels)}

    if strategy != "cfcer":
        acc = top1(baseline_scores(*va, strategy), val_data.labels) if va else float("nan")
        return FusionResult(None, strategy, [], acc, uni)

    torch.manual_seed(seed)
    n_cls = rgb_ckpt.config.dtn.num_classes
    model = CfcerFusion(tr_r.spatial.shape[-1], tr_r.cls_token.shape[-1], n_cls, cfcer_cfg)
    params = dict(model.named_parameters())
    state: Dict[str, torch.Tensor] = {}
    rng = np.random.default_rng(seed)
    targets = torch.from_numpy(np.eye(n_cls, dtype=np.float32)[train_data.labels])
    n = len(train_data)
    bs = min(cfg.fuse_batch_size, n)
    metrics = []
    for epoch in range(epochs):
        lr = cfg.fuse_lr * (1 + math.cos(math.pi * epoch / epochs)) / 2
        model.train()
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, bs):
            idx = torch.from_numpy(order[b:b + bs])
            out = fusion_forward(_index(tr_r, idx), _index(tr_d, idx), model)
            # normalized score is a distribution; its log is already log-softmax-shaped
            loss = soft_cross_entropy(torch.log((out.score / 4.0).clamp_min(1e-12)), targets[idx])
            model.zero_grad(set_to_none=True)
            loss.backward()
            sgd_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                     cfg.momentum, cfg.weight_decay)
            losses.append(loss.item())
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        if va is not None:
            with torch.no_grad():
                row["val_top1"] = top1(fusion_forward(*va, model).score, val_data.labels)
        metrics.append(row)
        log.info("fuse epoch %d loss %.4f val %.3f", epoch, row["loss"], row.get("val_top1", float("nan")))
    model.eval()
    return FusionResult(model, strategy, metrics, metrics[-1].get("val_top1", float("nan")), uni)


@torch.no_grad()
def fused_predict(model: CfcerFusion, rgb_ckpt, depth_ckpt, data: SplitData) -> FusionOutput:
    rgb_ckpt, depth_ckpt = _load(rgb_ckpt), _load(depth_ckpt)
    return fusion_forward(unimodal_outputs(rgb_ckpt, data.rgb), unimodal_outputs(depth_ckpt, data.depth), model)


# ---------------------------------------------------------------------------
# persistence


def save_fusion(model: CfcerFusion, path, rgb_ckpt: str, depth_ckpt: str, extra: Optional[dict] = None):
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    for name, p in model.state_dict().items():
        write_tensor(p, os.path.join(path, "params", name + ".umdt"))
    meta = {
        "kind": "cfcer", "rgb_ckpt": os.path.abspath(rgb_ckpt), "depth_ckpt": os.path.abspath(depth_ckpt),
        "channels": model.channels, "token_dim": model.token_dim, "num_classes": model.head_r.out_features,
        "cfcer": asdict(model.cfg), "extra": extra or {},
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)


def load_fusion(path):
    """Returns (model, meta)."""
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    cfg = CfcerConfig(**meta["cfcer"])
    pdir = os.path.join(path, "params")
    state = {fn[:-5]: torch.from_numpy(read_tensor(os.path.join(pdir, fn)))
             for fn in os.listdir(pdir) if fn.endswith(".umdt")}
    model = CfcerFusion(meta["channels"], meta["token_dim"], meta["num_classes"], cfg)
    model.load_state_dict(state)
    model.eval()
    return model, meta
