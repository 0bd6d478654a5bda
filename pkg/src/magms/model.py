"""Per-modality encoders, point-wise projection, mean fusion, shared decoder.

The default backbone is a tiny 3D conv net sized for CPU: each encoder
downsamples with stride-2 convolutions (widths 8 then 16 by default), every
feature level passes through a 1x1x1 point-wise projection, and one shared
decoder upsamples back to full resolution with skip connections. The
encoder/decoder split is behind plain nn.Modules, so a heavier encoder can be
dropped in without touching fusion or the losses.

Fusion is the element-wise mean over available modalities, summed in ascending
modality-index order so the result is bit-identical under any input
permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import ExperimentConfig, ModalityId, ModalitySubset, ModalityVolume, derive_seed
from .errors import ConfigurationError, DataError, ShapeError


@dataclass(frozen=True)
class FeatureBundle:
    """Projected features for one modality (or a fused set): bottleneck + skips.

    Tensors may carry a leading batch dimension; bundles fused together must
    agree level-by-level on full shape.
    """

    bottleneck: torch.Tensor
    skips: tuple[torch.Tensor, ...] = ()
    modality: ModalityId | None = None

    @property
    def levels(self) -> tuple[torch.Tensor, ...]:
        return (self.bottleneck, *self.skips)

    def shape_signature(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(t.shape) for t in self.levels)

    def detached(self) -> "FeatureBundle":
        return FeatureBundle(
            bottleneck=self.bottleneck.detach(),
            skips=tuple(s.detach() for s in self.skips),
            modality=self.modality,
        )


@dataclass(frozen=True)
class ForwardOutputs:
    """Everything one training iteration needs: per-modality and fused branches."""

    per_modality_logits: tuple[torch.Tensor, ...]
    fused_logits: torch.Tensor
    per_modality_bundles: tuple[FeatureBundle, ...]
    fused_bundle: FeatureBundle


def fuse(bundles: list[FeatureBundle] | tuple[FeatureBundle, ...]) -> FeatureBundle:
    """Element-wise mean of feature bundles at every level.

    When every bundle carries a distinct modality identity, summation runs in
    ascending modality-index order regardless of list order, making the mean
    exactly permutation invariant.
    """
    if not bundles:
        raise ConfigurationError("fuse() needs at least one bundle")
    if len(bundles) == 1:
        return bundles[0]
    sig = bundles[0].shape_signature()
    for b in bundles[1:]:
        if b.shape_signature() != sig:
            raise ShapeError(
                f"bundle shapes disagree: {sig} vs {b.shape_signature()}"
            )
    mods = [b.modality for b in bundles]
    if all(m is not None for m in mods) and len({m.index for m in mods}) == len(mods):
        ordered = sorted(bundles, key=lambda b: b.modality.index)
    else:
        ordered = list(bundles)
    n = len(ordered)
    fused_levels = []
    for lvl in range(len(sig)):
        acc = ordered[0].levels[lvl]
        for b in ordered[1:]:
            acc = acc + b.levels[lvl]
        fused_levels.append(acc / n)
    return FeatureBundle(bottleneck=fused_levels[0], skips=tuple(fused_levels[1:]))


class FeatureEncoder(nn.Module):
    """Stride-2 conv stages plus 1x1x1 projections; emits a FeatureBundle.

    Projection widths equal their input widths, and the projection is applied
    per level before any fusion, so the shared decoder always receives
    linearly recombined features of fixed shape.
    """

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        self.widths = tuple(widths)
        stages = []
        prev = in_channels
        for w in self.widths:
            stages.append(nn.Conv3d(prev, w, kernel_size=3, stride=2, padding=1))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.skip_projs = nn.ModuleList(
            nn.Conv3d(w, w, kernel_size=1) for w in self.widths[:-1]
        )
        self.bottleneck_proj = nn.Conv3d(self.widths[-1], self.widths[-1], kernel_size=1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, modality: ModalityId | None = None) -> FeatureBundle:
        skips = []
        for k, stage in enumerate(self.stages):
            x = self.act(stage(x))
            if k < len(self.stages) - 1:
                skips.append(self.skip_projs[k](x))
        return FeatureBundle(
            bottleneck=self.bottleneck_proj(x), skips=tuple(skips), modality=modality
        )


class FusionDecoder(nn.Module):
    """Shared decoder: upsample, merge skips, emit per-voxel class logits."""

    def __init__(self, widths: tuple[int, ...], num_classes: int):
        super().__init__()
        self.widths = tuple(widths)
        ups, merges = [], []
        for k in range(len(self.widths) - 1, 0, -1):
            ups.append(nn.ConvTranspose3d(self.widths[k], self.widths[k - 1], 2, stride=2))
            merges.append(nn.Conv3d(2 * self.widths[k - 1], self.widths[k - 1], 3, padding=1))
        self.ups = nn.ModuleList(ups)
        self.merges = nn.ModuleList(merges)
        self.final_up = nn.ConvTranspose3d(self.widths[0], self.widths[0], 2, stride=2)
        self.final_conv = nn.Conv3d(self.widths[0], self.widths[0], 3, padding=1)
        self.head = nn.Conv3d(self.widths[0], num_classes, kernel_size=1)
        self.act = nn.SiLU()

    def forward(self, bundle: FeatureBundle) -> torch.Tensor:
        expected_skips = len(self.widths) - 1
        if len(bundle.skips) != expected_skips:
            raise ShapeError(
                f"decoder expects {expected_skips} skip level(s), bundle has {len(bundle.skips)}"
            )
        if bundle.bottleneck.shape[-4] != self.widths[-1]:
            raise ShapeError(
                f"bottleneck has {bundle.bottleneck.shape[-4]} channels, decoder expects {self.widths[-1]}"
            )
        x = bundle.bottleneck
        # skips are stored shallow-to-deep; the decoder consumes deepest first
        for i, (up, merge) in enumerate(zip(self.ups, self.merges)):
            skip = bundle.skips[expected_skips - 1 - i]
            x = self.act(merge(torch.cat([up(x), skip], dim=-4)))
        x = self.act(self.final_conv(self.final_up(x)))
        return self.head(x)


class MagModel(nn.Module):
    """One encoder per modality, one shared decoder, subset-agnostic forward."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        self.modality_set = config.modality_set
        self.encoders = nn.ModuleList(
            FeatureEncoder(1, config.encoder_widths) for _ in self.modality_set
        )
        self.decoder = FusionDecoder(config.encoder_widths, config.num_classes)

    @property
    def depth(self) -> int:
        return len(self.config.encoder_widths)

    def _check_spatial(self, shape) -> None:
        factor = 2**self.depth
        if len(shape) != 3:
            raise ShapeError(f"expected 3 spatial dims, got {tuple(shape)}")
        if any(int(s) % factor != 0 for s in shape):
            raise ShapeError(
                f"spatial shape {tuple(shape)} must be divisible by {factor} "
                f"for a depth-{self.depth} backbone"
            )

    def _resolve(self, modality: ModalityId) -> ModalityId:
        for m in self.modality_set:
            if m == modality:
                return m
        raise ConfigurationError(
            f"modality {modality.name!r} (index {modality.index}) is not in the "
            f"model's set {self.modality_set.names}"
        )

    def encode_tensor(self, x: torch.Tensor, modality: ModalityId) -> FeatureBundle:
        """Encode a batched (N,1,D,H,W) tensor with the modality's encoder."""
        modality = self._resolve(modality)
        if x.dim() != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (N,1,D,H,W) input, got {tuple(x.shape)}")
        self._check_spatial(x.shape[2:])
        return self.encoders[modality.index](x, modality=modality)

    def encode(self, volume: ModalityVolume) -> FeatureBundle:
        """Encode one volume; returned tensors are rank-4 (C, D', H', W')."""
        x = volume_to_tensor(volume).unsqueeze(0)
        bundle = self.encode_tensor(x, volume.modality)
        return FeatureBundle(
            bottleneck=bundle.bottleneck.squeeze(0),
            skips=tuple(s.squeeze(0) for s in bundle.skips),
            modality=bundle.modality,
        )

    def decode(self, bundle: FeatureBundle) -> torch.Tensor:
        """Decode a bundle to logits; accepts rank-4 (single) or rank-5 (batched)."""
        if bundle.bottleneck.dim() == 4:
            batched = FeatureBundle(
                bottleneck=bundle.bottleneck.unsqueeze(0),
                skips=tuple(s.unsqueeze(0) for s in bundle.skips),
                modality=bundle.modality,
            )
            return self.decoder(batched).squeeze(0)
        if bundle.bottleneck.dim() == 5:
            return self.decoder(bundle)
        raise ShapeError(
            f"bundle bottleneck must be rank 4 or 5, got rank {bundle.bottleneck.dim()}"
        )

    def forward_subset_tensors(
        self, volumes: dict[int, torch.Tensor], subset: ModalitySubset
    ) -> torch.Tensor:
        bundles = [
            self.encode_tensor(volumes[m.index], m) for m in subset
        ]
        return self.decoder(fuse(bundles))

    def forward_subset(self, sample, subset: ModalitySubset) -> torch.Tensor:
        """Logits (C,D,H,W) from the fused features of the subset's modalities."""
        if len(subset) == 0:
            raise ConfigurationError("forward_subset needs a non-empty subset")
        bundles = []
        for m in subset:
            self._resolve(m)
            bundles.append(self.encode(sample.volume(m)))
        return self.decode(fuse(bundles))

    def forward_all(self, sample) -> ForwardOutputs:
        """All M single-modality branches plus the fused branch (M+1 decoder passes)."""
        batch = {
            m.index: volume_to_tensor(sample.volume(m)).unsqueeze(0)
            for m in self.modality_set
        }
        out = self.forward_all_tensors(batch)
        return ForwardOutputs(
            per_modality_logits=tuple(l.squeeze(0) for l in out.per_modality_logits),
            fused_logits=out.fused_logits.squeeze(0),
            per_modality_bundles=tuple(
                FeatureBundle(
                    b.bottleneck.squeeze(0),
                    tuple(s.squeeze(0) for s in b.skips),
                    b.modality,
                )
                for b in out.per_modality_bundles
            ),
            fused_bundle=FeatureBundle(
                out.fused_bundle.bottleneck.squeeze(0),
                tuple(s.squeeze(0) for s in out.fused_bundle.skips),
            ),
        )

    def forward_all_tensors(self, volumes: dict[int, torch.Tensor]) -> ForwardOutputs:
        """Batched forward of every modality one-by-one, then the fused branch."""
        missing = [m.name for m in self.modality_set if m.index not in volumes]
        if missing:
            raise DataError(f"forward_all needs every modality; missing {missing}")
        bundles, logits = [], []
        for m in self.modality_set:
            b = self.encode_tensor(volumes[m.index], m)
            bundles.append(b)
            logits.append(self.decoder(b))
        fused_bundle = fuse(bundles)
        fused_logits = self.decoder(fused_bundle)
        return ForwardOutputs(
            per_modality_logits=tuple(logits),
            fused_logits=fused_logits,
            per_modality_bundles=tuple(bundles),
            fused_bundle=fused_bundle,
        )

    def forward(self, volumes: dict[int, torch.Tensor]) -> ForwardOutputs:
        return self.forward_all_tensors(volumes)


class MultiChannelModel(nn.Module):
    """Baseline: one encoder over all modalities stacked as input channels."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        self.modality_set = config.modality_set
        self.encoder = FeatureEncoder(len(self.modality_set), config.encoder_widths)
        self.decoder = FusionDecoder(config.encoder_widths, config.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != len(self.modality_set):
            raise ShapeError(
                f"expected (N,{len(self.modality_set)},D,H,W) input, got {tuple(x.shape)}"
            )
        return self.decoder(self.encoder(x))


def build_model(config: ExperimentConfig, seed: int | None = None) -> MagModel:
    """Construct a MagModel with seeded uniform fan-in initialization."""
    torch.manual_seed(derive_seed(seed if seed is not None else config.seed, "model-init"))
    return MagModel(config)


def build_multichannel_model(config: ExperimentConfig, seed: int | None = None) -> MultiChannelModel:
    torch.manual_seed(derive_seed(seed if seed is not None else config.seed, "model-init"))
    return MultiChannelModel(config)


def volume_to_tensor(volume: ModalityVolume) -> torch.Tensor:
    """(1, D, H, W) float32 tensor view of a volume."""
    return torch.from_numpy(np.ascontiguousarray(volume.voxels)).unsqueeze(0)


def labels_to_tensor(labels) -> torch.Tensor:
    """(D, H, W) int64 tensor of class indices."""
    return torch.from_numpy(np.ascontiguousarray(labels.classes)).long()
