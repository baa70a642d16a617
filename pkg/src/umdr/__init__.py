"""Decoupled spatial/temporal video networks for RGB-D action recognition.

ShuffleMix+ augmentation, a DSN/DTN unimodal network with multi-stage
recoupling distillation, and CFCer late fusion, sized to run on a CPU.
"""
from .augment import MixParams, mixup_pair, shufflemix_pair, shufflemix_plus
from .config import RunConfig, preset
from .data import VideoClip, LabeledSample, generate_synthetic_dataset
from .model import UMDRNet
from .train import evaluate, train

__version__ = "0.1.0"
