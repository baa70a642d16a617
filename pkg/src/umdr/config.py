"""Run configuration, flat dotted-key JSON (de)serialization and presets."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .augment import MixParams
from .dsn import DsnConfig
from .dtn import DtnConfig
from .objectives import LossWeights

MODALITIES = ("rgb", "depth", "fused")


@dataclass
class RunConfig:
    dataset: str = ""
    modality: str = "rgb"
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.01
    warmup_epochs: int = 5
    weight_decay: float = 3e-4
    momentum: float = 0.9
    tau_start: float = 0.04
    tau_end: float = 0.07
    pad: int = 0  # edge padding before the random training crop
    seed: int = 0
    mix: MixParams = field(default_factory=MixParams)
    loss: LossWeights = field(default_factory=LossWeights)
    dsn: DsnConfig = field(default_factory=DsnConfig)
    dtn: DtnConfig = field(default_factory=DtnConfig)
    eval_every: int = 1  # accuracy columns are NaN on other epochs; the last epoch is always scored
    fuse_epochs: int = 20
    fuse_lr: float = 0.1
    fuse_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")

    # -- flat dotted keys ------------------------------------------------------

    _SECTIONS = {"mix": MixParams, "loss": LossWeights, "dsn": DsnConfig, "dtn": DtnConfig}
    _ALIASES = {
        "optim.lr": "lr", "optim.warmup_epochs": "warmup_epochs",
        "optim.weight_decay": "weight_decay", "optim.momentum": "momentum",
        "tau.start": "tau_start", "tau.end": "tau_end", "data.pad": "pad",
        "fuse.epochs": "fuse_epochs", "fuse.lr": "fuse_lr", "fuse.batch_size": "fuse_batch_size",
        "mix.geometry": "mix.mix_geometry", "distill.t2_scaling": "loss.t2_scaling",
    }

    def to_flat(self) -> dict:
        out = {}
        inverse = {v: k for k, v in self._ALIASES.items()}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in self._SECTIONS:
                for k, v in asdict(val).items():
                    key = inverse.get(f"{f.name}.{k}", f"{f.name}.{k}")
                    out[key] = list(v) if isinstance(v, tuple) else v
            else:
                out[inverse.get(f.name, f.name)] = val
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig" = None) -> "RunConfig":
        cfg = copy.deepcopy(base) if base is not None else cls()
        top, sections = {}, {k: asdict(getattr(cfg, k)) for k in cls._SECTIONS}
        for key, val in _flatten(flat).items():
            key = cls._ALIASES.get(key, key)
            if "." in key:
                sec, name = key.split(".", 1)
                if sec not in sections or name not in sections[sec]:
                    raise KeyError(f"unknown config key {key!r}")
                sections[sec][name] = val
            else:
                if key not in {f.name for f in fields(cls)} or key in cls._SECTIONS:
                    raise KeyError(f"unknown config key {key!r}")
                top[key] = val
        kwargs = {f.name: getattr(cfg, f.name) for f in fields(cls)}
        kwargs.update(top)
        for sec, typ in cls._SECTIONS.items():
            kwargs[sec] = typ(**sections[sec])
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_flat(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, base: "RunConfig" = None) -> "RunConfig":
        with open(path) as f:
            return cls.from_flat(json.load(f), base)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def preset(name: str, **overrides) -> RunConfig:
    """Named configurations. ``umdr-tiny`` is the CPU-sized toy setup."""
    if name == "umdr-tiny":
        cfg = RunConfig(
            epochs=30, batch_size=16, pad=2, lr=1e-3, warmup_epochs=3,
            dsn=DsnConfig(stem_channels=32, stages=3, widths=(32, 48, 32), d_rcm=64, frames=16),
            dtn=DtnConfig(n_branches=3, blocks=2, heads=4, knn_ratio=0.7, num_classes=8),
        )
    elif name == "umdr-base":
        cfg = RunConfig()
    else:
        raise KeyError(f"unknown preset {name!r}")
    return RunConfig.from_flat(overrides, cfg) if overrides else cfg
