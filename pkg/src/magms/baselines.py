"""Comparison arms: zero/mean filling for a multi-channel model, dropout-mean fusion.

The fill arms use one conventional model that expects every modality stacked
as input channels; at test time, channels of unavailable modalities are
replaced with zeros or the training-split voxelwise mean. The dropout-mean
arm trains the subset-agnostic model by drawing a random surviving modality
subset per sample and fusing only those encoders, with the plain dice+CE
objective (no distillation).

All arms evaluate through the same subset-sweep harness, so their report rows
are directly comparable.
"""

from __future__ import annotations

import enum

import numpy as np
import torch

from .core import ModalityId, ModalitySet, ModalitySubset
from .errors import ConfigurationError, DataError
from .model import MultiChannelModel, volume_to_tensor


class FillStrategy(enum.Enum):
    """How to synthesize a missing modality's input channel."""

    ZEROS = "zeros"
    DATASET_MEAN = "dataset_mean"


def compute_mean_volumes(samples, modality_set: ModalitySet) -> dict[str, np.ndarray]:
    """Per-modality voxelwise mean over a training split (float32)."""
    if not samples:
        raise ConfigurationError("cannot compute mean volumes from an empty split")
    means = {}
    for m in modality_set:
        acc = np.zeros(samples[0].shape, dtype=np.float64)
        for s in samples:
            acc += s.volume(m).voxels
        means[m.name] = (acc / len(samples)).astype(np.float32)
    return means


def build_filled_input(
    sample,
    subset: ModalitySubset,
    strategy: FillStrategy,
    modality_set: ModalitySet,
    mean_volumes: dict[str, np.ndarray] | None = None,
) -> torch.Tensor:
    """(1, M, D, H, W) tensor with real channels for `subset`, fills elsewhere."""
    if len(subset) == 0:
        raise ConfigurationError("subset must be non-empty")
    available = set(subset.indices)
    channels = []
    for m in modality_set:
        if m.index in available:
            channels.append(volume_to_tensor(sample.volume(m)))
        elif strategy is FillStrategy.ZEROS:
            channels.append(torch.zeros(1, *sample.shape))
        else:
            if not mean_volumes or m.name not in mean_volumes:
                raise ConfigurationError(
                    f"dataset_mean fill needs a precomputed mean volume for {m.name!r}"
                )
            mean = mean_volumes[m.name]
            if tuple(mean.shape) != tuple(sample.shape):
                raise DataError(
                    f"mean volume for {m.name!r} has shape {mean.shape}, sample is {sample.shape}"
                )
            channels.append(torch.from_numpy(np.ascontiguousarray(mean)).unsqueeze(0))
    return torch.cat(channels, dim=0).unsqueeze(0)


def fill_forward(
    model: MultiChannelModel,
    sample,
    subset: ModalitySubset,
    strategy: FillStrategy,
    mean_volumes: dict[str, np.ndarray] | None = None,
) -> torch.Tensor:
    """Forward pass of the multi-channel baseline with missing channels filled."""
    x = build_filled_input(sample, subset, strategy, model.modality_set, mean_volumes)
    return model(x).squeeze(0)


def draw_nonempty_subset(
    modality_set: ModalitySet, rng: np.random.Generator, dropout_prob: float
) -> ModalitySubset:
    """Drop each modality independently with `dropout_prob`; redraw if all drop.

    At dropout_prob=0.5 the conditioned draw is exactly uniform over the
    2^M - 1 non-empty subsets.
    """
    if not (0.0 < dropout_prob < 1.0):
        raise ConfigurationError(f"dropout_prob must be in (0, 1), got {dropout_prob}")
    mods = tuple(modality_set)
    while True:
        keep = rng.random(len(mods)) >= dropout_prob
        if keep.any():
            return ModalitySubset(tuple(m for m, k in zip(mods, keep) if k))


def dropout_fusion_train_step(state, batch):
    """One optimizer step of the dropout-mean arm (subset draw + DC loss)."""
    if state.arm != "dropout_mean":
        raise ConfigurationError(
            f"dropout_fusion_train_step requires a dropout_mean state, got arm {state.arm!r}"
        )
    from .training import train_step

    return train_step(state, batch)
