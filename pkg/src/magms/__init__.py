"""Modality-agnostic 3D segmentation with multi-modality self-distillation.

Per-modality encoders feed a shared decoder through mean feature fusion, so a
single trained model segments from any non-empty modality subset. Training
distills the fused all-modality branch into each single-modality branch.
Ships with a synthetic multi-modal phantom pipeline, subset-sweep reporting,
fill/dropout baselines, and a numerical verifier for the entropy/KL bound
behind the approach.
"""

__version__ = "0.1.0"

from .core import (
    ExperimentConfig,
    LabelMap,
    ModalityId,
    ModalitySet,
    ModalitySubset,
    ModalityVolume,
    enumerate_subsets,
)
from .data import MultiModalSample, PhantomSpec, generate_phantom, read_dataset, write_dataset
from .losses import LossBreakdown, dice_ce, feature_l2, mag_loss, modality_loss, pixel_kl
from .model import FeatureBundle, MagModel, MultiChannelModel, build_model, fuse
from .training import TrainState, init_state, load_checkpoint, save_checkpoint, train, train_step

__all__ = [
    "ExperimentConfig",
    "FeatureBundle",
    "LabelMap",
    "LossBreakdown",
    "MagModel",
    "ModalityId",
    "ModalitySet",
    "ModalitySubset",
    "ModalityVolume",
    "MultiChannelModel",
    "MultiModalSample",
    "PhantomSpec",
    "TrainState",
    "__version__",
    "build_model",
    "dice_ce",
    "enumerate_subsets",
    "feature_l2",
    "fuse",
    "generate_phantom",
    "init_state",
    "load_checkpoint",
    "mag_loss",
    "modality_loss",
    "pixel_kl",
    "read_dataset",
    "save_checkpoint",
    "train",
    "train_step",
    "write_dataset",
]
