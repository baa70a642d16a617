"""Training and evaluation loops, optimizer, schedules and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .augment import shufflemix_plus
from .config import RunConfig
from .data import LabeledSample, VideoClip, load_split, one_hot, sample_frames
from .dtn import tau_schedule
from .model import UMDRNet
from .objectives import RecouplingInputs, distill_loss, soft_cross_entropy, total_loss
from .tensor_io import read_tensor, write_tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "tau", "ce", "branch_ce", "distill", "train_top1", "val_top1"]


# ---------------------------------------------------------------------------
# schedules and optimizer


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    """Linear warmup to the peak over ``warmup_epochs``, then cosine decay to 0."""
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr * (epoch + 1) / w
    span = max(cfg.epochs - w, 1)
    return cfg.lr * (1 + math.cos(math.pi * (epoch - w) / span)) / 2


def sgd_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
             state: Dict[str, torch.Tensor], lr: float, momentum: float = 0.9,
             weight_decay: float = 3e-4) -> None:
    """In-place SGD with momentum and L2 decay: v <- m*v + g + wd*p; p <- p - lr*v."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = state.get(name)
            if v is None:
                v = state[name] = torch.zeros_like(p)
            v.mul_(momentum).add_(g).add_(p, alpha=weight_decay)
            p.sub_(lr * v)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: RunConfig
    epoch: int  # last completed epoch
    tau: float
    rng_state: Optional[dict] = None
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    metrics: List[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _rng_to_hex(state: dict) -> str:
    return json.dumps(state, sort_keys=True).encode().hex()


def _rng_from_hex(blob: str) -> dict:
    return json.loads(bytes.fromhex(blob).decode())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    os.makedirs(path, exist_ok=True)
    for name, arr in ckpt.params.items():
        write_tensor(arr, os.path.join(path, "params", f"{name}.umdt"))
    for name, arr in ckpt.momentum.items():
        write_tensor(arr, os.path.join(path, "momentum", f"{name}.umdt"))
    meta = {
        "config": ckpt.config.to_flat(),
        "epoch": ckpt.epoch,
        "tau": ckpt.tau,
        "rng_state": _rng_to_hex(ckpt.rng_state) if ckpt.rng_state else None,
        "shapes": {k: list(v.shape) for k, v in ckpt.params.items()},
        "extra": ckpt.extra,
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    write_metrics_csv(ckpt.metrics, os.path.join(path, "metrics.csv"))


def load_checkpoint(path) -> Checkpoint:
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)

    def _load_dir(sub):
        d = os.path.join(path, sub)
        if not os.path.isdir(d):
            return {}
        return {n[:-5]: read_tensor(os.path.join(d, n)) for n in sorted(os.listdir(d)) if n.endswith(".umdt")}

    metrics_path = os.path.join(path, "metrics.csv")
    return Checkpoint(
        params=_load_dir("params"),
        config=RunConfig.from_flat(meta["config"]),
        epoch=meta["epoch"],
        tau=meta["tau"],
        rng_state=_rng_from_hex(meta["rng_state"]) if meta.get("rng_state") else None,
        momentum=_load_dir("momentum"),
        metrics=read_metrics_csv(metrics_path) if os.path.exists(metrics_path) else [],
        extra=meta.get("extra", {}),
    )


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(metrics_csv_text(rows))


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRICS_HEADER})
    return buf.getvalue()


def read_metrics_csv(path) -> List[dict]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def build_model(cfg: RunConfig) -> UMDRNet:
    torch.manual_seed(cfg.seed)
    return UMDRNet(cfg.dsn, cfg.dtn)


def model_from_checkpoint(ckpt: Checkpoint) -> UMDRNet:
    model = UMDRNet(ckpt.config.dsn, ckpt.config.dtn)
    load_params(model, ckpt.params)
    return model


def load_params(model: torch.nn.Module, params: Dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    missing = set(own) - set(params)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)))


def export_params(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class SplitData:
    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def clips(self, modality):
        return self.rgb if modality == "rgb" else self.depth

    def sample(self, i) -> LabeledSample:
        return LabeledSample(VideoClip(self.rgb[i], "rgb"), VideoClip(self.depth[i], "depth"),
                             one_hot(int(self.labels[i]), self.num_classes))


def load_data(root, split) -> SplitData:
    rgb, depth, labels, man = load_split(root, split)
    return SplitData(rgb, depth, labels, man.num_classes)


def _train_view(s: LabeledSample, T: int, pad: int, rng) -> LabeledSample:
    """Same frame indices and crop for both modalities."""
    state = rng.bit_generator.state
    rgb = sample_frames(s.rgb, T, "train", rng, pad=pad)
    rng.bit_generator.state = state
    depth = sample_frames(s.depth, T, "train", rng, pad=pad)
    return LabeledSample(rgb, depth, s.label)


# ---------------------------------------------------------------------------
# loops


@dataclass
class StepRecord:
    epoch: int
    ce: float
    branch_ce: float
    distill: float
    total: float


def forward_losses(model: UMDRNet, x, target, tau, cfg: RunConfig, rng=None):
    out = model(x, tau, rng)
    # loss terms in float64 so the logged total decomposes exactly into its parts
    target = target.double()
    ce = soft_cross_entropy(out.fused_logits.double(), target)
    bces = [soft_cross_entropy(lg.double(), target) for lg in out.branch_logits]
    rec = model.recoupling_inputs(out)
    rec = RecouplingInputs([t.double() for t in rec.teachers], [s.double() for s in rec.students])
    distill = distill_loss(rec, cfg.loss.distill_T, cfg.loss.t2_scaling)
    total = total_loss(ce, bces, distill, cfg.loss)
    return out, ce, bces, distill, total


@torch.inference_mode()
def predict_logits(model: UMDRNet, clips: np.ndarray, tau: float, batch_size: int = 64):
    model.eval()
    outs = []
    for i in range(0, len(clips), batch_size):
        outs.append(model(torch.from_numpy(clips[i:i + batch_size]), tau).fused_logits)
    return torch.cat(outs)


def top1(logits, labels) -> float:
    pred = logits.argmax(dim=-1).cpu().numpy()
    return float(np.mean(pred == np.asarray(labels)))


def evaluate(ckpt, dataset, split: str = "val", modality: Optional[str] = None) -> float:
    """Top-1 of a unimodal checkpoint (or Checkpoint/path) on a dataset split (or SplitData)."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    data = dataset if isinstance(dataset, SplitData) else load_data(dataset, split)
    if data.num_classes != ckpt.config.dtn.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, checkpoint {ckpt.config.dtn.num_classes}")
    model = model_from_checkpoint(ckpt)
    modality = modality or ckpt.config.modality
    return top1(predict_logits(model, data.clips(modality), ckpt.tau), data.labels)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[dict]
    steps: List[StepRecord]
    model: UMDRNet


def train(cfg: RunConfig, out_dir: Optional[str] = None, resume: Optional[Checkpoint] = None,
          stop_after: Optional[int] = None, train_data: SplitData = None,
          val_data: SplitData = None, deterministic: bool = True) -> TrainResult:
    """Unimodal training.

    ``stop_after`` ends the run after that many completed epochs (to exercise
    resume); ``resume`` continues from a checkpoint written by an earlier call.
    """
    if cfg.modality not in ("rgb", "depth"):
        raise ValueError("train() handles unimodal runs; use fusion.train_fusion for 'fused'")
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    if train_data is None:
        if not cfg.dataset or not os.path.exists(os.path.join(cfg.dataset, "manifest.json")):
            raise FileNotFoundError(f"dataset {cfg.dataset!r} has no manifest.json")
        train_data = load_data(cfg.dataset, "train")
        val_data = load_data(cfg.dataset, "val")
    if train_data.num_classes != cfg.dtn.num_classes:
        raise ValueError(f"dataset has {train_data.num_classes} classes, config {cfg.dtn.num_classes}")
    if train_data.rgb.shape[1] != cfg.dsn.frames:
        raise ValueError(f"clips have T={train_data.rgb.shape[1]}, config expects {cfg.dsn.frames}")
    if len(train_data) < 2:
        raise ValueError("need at least two training samples")

    model = build_model(cfg)
    params = dict(model.named_parameters())
    momentum: Dict[str, torch.Tensor] = {}
    rng = np.random.default_rng(cfg.seed)
    metrics: List[dict] = []
    start = 0
    if resume is not None:
        load_params(model, resume.params)
        momentum = {k: torch.from_numpy(v.copy()) for k, v in resume.momentum.items()}
        rng.bit_generator.state = resume.rng_state
        metrics = list(resume.metrics)
        start = resume.epoch + 1

    steps: List[StepRecord] = []
    n = len(train_data)
    bs = min(cfg.batch_size, n)
    tau = tau_schedule(start, cfg.epochs, cfg.tau_start, cfg.tau_end)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    for epoch in range(start, last):
        lr = lr_schedule(epoch, cfg)
        tau = tau_schedule(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
        model.train()
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_steps = 0
        for b in range(0, n - bs + 1, bs):  # drop the ragged tail
            batch = [_train_view(train_data.sample(i), cfg.dsn.frames, cfg.pad, rng)
                     for i in order[b:b + bs]]
            mixed = shufflemix_plus(batch, cfg.mix, rng)
            x = torch.from_numpy(np.stack([m.clip(cfg.modality).frames for m in mixed]))
            y = torch.from_numpy(np.stack([m.label for m in mixed]).astype(np.float32))
            _, ce, bces, distill, total = forward_losses(model, x, y, tau, cfg, rng)
            model.zero_grad(set_to_none=True)
            total.backward()
            sgd_step(params, {k: p.grad for k, p in params.items()}, momentum, lr,
                     cfg.momentum, cfg.weight_decay)
            bce = float(sum(c.item() for c in bces))
            rec = StepRecord(epoch, ce.item(), bce, distill.item(), total.item())
            steps.append(rec)
            sums += (rec.ce, rec.branch_ce, rec.distill)
            n_steps += 1
        sums /= max(n_steps, 1)
        # scoring touches neither the rng nor the parameters, so skipping it leaves training unchanged
        scored = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        train_acc = val_acc = float("nan")
        if scored:
            train_acc = top1(predict_logits(model, train_data.clips(cfg.modality), tau), train_data.labels)
            if val_data is not None and len(val_data):
                val_acc = top1(predict_logits(model, val_data.clips(cfg.modality), tau), val_data.labels)
        row = {"epoch": epoch, "lr": lr, "tau": tau, "ce": float(sums[0]), "branch_ce": float(sums[1]),
               "distill": float(sums[2]), "train_top1": train_acc, "val_top1": val_acc}
        metrics.append(row)
        log.info("epoch %d lr %.5f tau %.4f ce %.4f branch %.4f distill %.4f train %.3f val %.3f",
                 epoch, lr, tau, row["ce"], row["branch_ce"], row["distill"], train_acc, val_acc)
        start = epoch + 1

    ckpt = Checkpoint(
        params=export_params(model), config=cfg, epoch=start - 1, tau=tau,
        rng_state=rng.bit_generator.state,
        momentum={k: v.numpy().copy() for k, v in momentum.items()},
        metrics=metrics,
    )
    if out_dir:
        save_checkpoint(ckpt, out_dir)
        write_metrics_csv(metrics, os.path.join(out_dir, "metrics.csv"))
    return TrainResult(ckpt, metrics, steps, model)
