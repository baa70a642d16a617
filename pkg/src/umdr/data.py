"""Clips, datasets and the synthetic paired RGB-D motion generator."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .tensor_io import read_tensor, write_tensor

MODALITIES = ("rgb", "depth")
TRAJECTORIES = ("linear", "circular", "zigzag", "bounce")
SHAPES = ("disk", "bar")


class MissingFrameError(FileNotFoundError):
    pass


class FrameShapeError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # T x 3 x H x W, values in [0, 1]
    modality: str = "rgb"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise FrameShapeError(f"expected T x 3 x H x W frames, got {self.frames.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class LabeledSample:
    rgb: VideoClip
    depth: VideoClip
    label: np.ndarray  # soft label over C classes

    def __post_init__(self):
        if self.rgb.frames.shape != self.depth.frames.shape:
            raise FrameShapeError(
                f"rgb {self.rgb.frames.shape} and depth {self.depth.frames.shape} differ"
            )
        if np.any(self.label < 0) or abs(float(self.label.sum()) - 1.0) > 1e-6:
            raise ValueError("label must be a probability vector")

    def clip(self, modality: str) -> VideoClip:
        return self.rgb if modality == "rgb" else self.depth


@dataclass
class DatasetManifest:
    root: str
    num_classes: int
    split: str
    sample_ids: List[str]
    labels: List[int]
    frame_counts: List[int]
    class_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.sample_ids)

    def index(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise KeyError(f"sample {sample_id!r} not in {self.split} split") from None


def one_hot(k: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float64)
    y[k] = 1.0
    return y


# ---------------------------------------------------------------------------
# manifest / loading


def load_manifest(root, split: str = "train") -> DatasetManifest:
    with open(os.path.join(root, "manifest.json")) as f:
        meta = json.load(f)
    samples = [s for s in meta["samples"] if s.get("split", "train") == split]
    classes = meta["classes"]
    return DatasetManifest(
        root=str(root),
        num_classes=len(classes),
        split=split,
        sample_ids=[s["id"] for s in samples],
        labels=[int(s["label"]) for s in samples],
        frame_counts=[int(s["T"]) for s in samples],
        class_names=list(classes),
    )


def load_clip(manifest: DatasetManifest, sample_id: str, modality: str) -> VideoClip:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    i = manifest.index(sample_id)
    path = os.path.join(manifest.root, sample_id, f"{modality}.umdt")
    if not os.path.exists(path):
        raise MissingFrameError(path)
    frames = read_tensor(path)
    T = manifest.frame_counts[i]
    if frames.ndim != 4 or frames.shape[0] != T or frames.shape[1] != 3:
        raise FrameShapeError(f"{path}: shape {frames.shape} does not match T={T} x 3 x H x W")
    frames = frames.astype(np.float32, copy=False)
    if frames.max(initial=0.0) > 1.0:
        frames = frames / 255.0
    return VideoClip(np.clip(frames, 0.0, 1.0), modality)


def load_sample(manifest: DatasetManifest, sample_id: str) -> LabeledSample:
    i = manifest.index(sample_id)
    return LabeledSample(
        rgb=load_clip(manifest, sample_id, "rgb"),
        depth=load_clip(manifest, sample_id, "depth"),
        label=one_hot(manifest.labels[i], manifest.num_classes),
    )


def load_split(root, split: str):
    """Load a whole split into memory as stacked arrays.

    Returns ``(rgb, depth, labels)`` with rgb/depth of shape N x T x 3 x H x W.
    """
    man = load_manifest(root, split)
    rgb = np.stack([load_clip(man, sid, "rgb").frames for sid in man.sample_ids])
    depth = np.stack([load_clip(man, sid, "depth").frames for sid in man.sample_ids])
    return rgb, depth, np.asarray(man.labels, dtype=np.int64), man


# ---------------------------------------------------------------------------
# frame sampling


def segment_indices(T: int, T_out: int, mode: str = "eval", rng=None) -> np.ndarray:
    """0-based frame indices from uniform segment sampling.

    Eval takes the lower median of each segment; train draws uniformly inside it.
    """
    if T_out <= 0:
        raise ValueError("T_out must be positive")
    if T < 1:
        raise ValueError("clip has no frames")
    k = np.arange(T_out)
    start = (k * T) // T_out
    end = ((k + 1) * T) // T_out
    length = np.maximum(end - start, 1)
    if mode == "eval":
        return start + (length - 1) // 2
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        return start + np.floor(rng.random(T_out) * length).astype(np.int64)
    raise ValueError(f"unknown mode {mode!r}")


def sample_frames(clip: VideoClip, T_out: int, mode: str = "eval", rng=None,
                  crop: Optional[int] = None, pad: int = 0) -> VideoClip:
    """Temporal segment sampling plus a spatial crop.

    The clip is optionally edge-padded by ``pad`` pixels, then cropped to
    ``crop`` (defaults to the original size): random offset in train mode,
    centered in eval mode.
    """
    idx = segment_indices(clip.T, T_out, mode, rng)
    frames = clip.frames[idx]
    H, W = frames.shape[-2:]
    crop = crop or min(H, W)
    if pad:
        frames = np.pad(frames, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    Hp, Wp = frames.shape[-2:]
    if crop > min(Hp, Wp):
        raise ValueError(f"crop {crop} larger than frame {Hp}x{Wp}")
    if mode == "train":
        y0 = int(rng.integers(0, Hp - crop + 1))
        x0 = int(rng.integers(0, Wp - crop + 1))
    else:
        y0, x0 = (Hp - crop) // 2, (Wp - crop) // 2
    frames = frames[:, :, y0:y0 + crop, x0:x0 + crop]
    return VideoClip(np.ascontiguousarray(frames), clip.modality)


# ---------------------------------------------------------------------------
# synthetic paired RGB-D data

_Z_NEAR, _Z_FAR = 1.0, 8.0


def _inverse_depth(z):
    v = (1.0 / z - 1.0 / _Z_FAR) / (1.0 / _Z_NEAR - 1.0 / _Z_FAR)
    return np.clip(v, 0.0, 1.0)


def trajectory(kind: str, T: int, size: int, rng) -> np.ndarray:
    """Per-frame (y, x) centers for one motion program, shape T x 2."""
    s = np.linspace(0.0, 1.0, T)
    c = size / 2.0 + rng.uniform(-2.0, 2.0, size=2)
    span = 0.45 * size * rng.uniform(0.85, 1.1)
    sign = rng.choice([-1.0, 1.0])
    if kind == "linear":
        # straight diagonal sweep
        ang = rng.uniform(-0.3, 0.3) + (math.pi / 4 if sign > 0 else 3 * math.pi / 4)
        d = np.stack([np.sin(ang), np.cos(ang)])
        pts = c[None, :] + (s[:, None] - 0.5) * span * d[None, :]
    elif kind == "circular":
        r = 0.25 * size * rng.uniform(0.85, 1.1)
        ph = rng.uniform(0, 2 * math.pi)
        a = ph + sign * 2 * math.pi * s
        pts = c[None, :] + r * np.stack([np.sin(a), np.cos(a)], axis=1)
    elif kind == "zigzag":
        x = c[1] + sign * (s - 0.5) * span
        tri = 2.0 * np.abs(2.0 * ((3.0 * s) % 1.0) - 1.0) - 1.0
        y = c[0] + 0.2 * size * tri
        pts = np.stack([y, x], axis=1)
    elif kind == "bounce":
        floor = c[0] + 0.3 * size
        y = floor - 0.6 * size * np.abs(np.sin(2 * math.pi * s))
        x = c[1] + sign * 0.1 * size * (s - 0.5)
        pts = np.stack([y, x], axis=1)
    else:
        raise ValueError(f"unknown trajectory {kind!r}")
    return pts


def render_sample(traj: np.ndarray, shape: str, H: int, W: int, rng):
    """Render rgb and depth clips (T x 3 x H x W, float32) of one moving shape."""
    T = traj.shape[0]
    R = rng.uniform(0.13, 0.17) * H
    color = rng.uniform(0.45, 1.0, size=3)
    color[rng.integers(3)] *= 0.3
    bg_level = rng.uniform(0.02, 0.12)
    bg = bg_level + 0.03 * rng.standard_normal((3, H, W))
    ring_f = rng.uniform(0.6, 1.2)
    z0 = rng.uniform(1.6, 3.0)
    bulge = 0.35 * z0
    depth_bg = _inverse_depth(_Z_FAR) + 0.01 * rng.standard_normal((H, W))

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rgb = np.empty((T, 3, H, W))
    depth = np.empty((T, 3, H, W))
    for t in range(T):
        dy, dx = yy - traj[t, 0], xx - traj[t, 1]
        if shape == "disk":
            rr = np.sqrt(dy ** 2 + dx ** 2) / R
        elif shape == "bar":
            # wide flat bar: twice the disk radius across, half of it tall
            rr = np.maximum(np.abs(dy) / (0.5 * R), np.abs(dx) / (2.0 * R))
        else:
            raise ValueError(f"unknown shape {shape!r}")
        inside = rr <= 1.0
        tex = 0.9 + 0.1 * np.cos(ring_f * np.sqrt(dy ** 2 + dx ** 2))
        frame = bg.copy()
        frame[:, inside] = (color[:, None] * tex[inside][None, :])
        rgb[t] = frame
        # radial depth profile: centre is nearest to the camera
        z = z0 - bulge * (1.0 - np.minimum(rr, 1.0) ** 2)
        d = np.where(inside, _inverse_depth(z), depth_bg)
        depth[t] = d[None]
    return (np.clip(rgb, 0, 1).astype(np.float32),
            np.clip(depth, 0, 1).astype(np.float32))


def class_program(c: int):
    return TRAJECTORIES[c % len(TRAJECTORIES)], SHAPES[(c // len(TRAJECTORIES)) % len(SHAPES)]


def class_name(c: int) -> str:
    kind, shape = class_program(c)
    rep = c // (len(TRAJECTORIES) * len(SHAPES))
    return f"{kind}-{shape}" + (f"-{rep}" if rep else "")


def generate_synthetic_dataset(root, num_classes: int = 8, n_per_class: int = 32, T: int = 16,
                               H: int = 32, W: int = 32, seed: int = 0,
                               n_val_per_class: Optional[int] = None) -> DatasetManifest:
    """Write a paired RGB-D dataset of moving shapes under ``root``.

    Class ``c`` is trajectory ``c % 4`` rendered with shape ``(c // 4) % 2``.
    Both a train split (``n_per_class`` per class) and a val split
    (``n_val_per_class``, default ``max(2, n_per_class // 4)``) are written;
    the train manifest is returned.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if T < 8:
        raise ValueError("need T >= 8")
    if H != W or H < 16:
        raise ValueError("need square frames with H = W >= 16")
    if n_val_per_class is None:
        n_val_per_class = max(2, n_per_class // 4)
    os.makedirs(root, exist_ok=True)
    samples = []
    for split, n, tag in (("train", n_per_class, 0), ("val", n_val_per_class, 1)):
        for c in range(num_classes):
            kind, shape = class_program(c)
            rep = c // (len(TRAJECTORIES) * len(SHAPES))
            for k in range(n):
                rng = np.random.default_rng([seed, tag, c, k])
                traj = trajectory(kind, T, H, rng)
                if rep:
                    traj = traj[::-1].copy()  # extra classes replay the program backwards
                rgb, depth = render_sample(traj, shape, H, W, rng)
                sid = f"{split}_{c:03d}_{k:04d}"
                write_tensor(rgb, os.path.join(root, sid, "rgb.umdt"))
                write_tensor(depth, os.path.join(root, sid, "depth.umdt"))
                samples.append({"id": sid, "label": c, "T": T, "split": split})
    meta = {"classes": [class_name(c) for c in range(num_classes)], "samples": samples,
            "seed": seed, "H": H, "W": W}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return load_manifest(root, "train")


def motion_energy_track(frames: np.ndarray) -> np.ndarray:
    """Energy-weighted centre of frame-difference magnitude per step, (T-1) x 2 (y, x).

    Steps with no change at all map to NaN.
    """
    diff = np.abs(np.diff(frames.astype(np.float64), axis=0)).sum(axis=1)
    H, W = diff.shape[-2:]
    yy, xx = np.mgrid[0:H, 0:W]
    mass = diff.sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = (diff * yy).sum(axis=(1, 2)) / mass
        cx = (diff * xx).sum(axis=(1, 2)) / mass
    return np.stack([cy, cx], axis=1)


def stack_labels(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.label for s in samples])
