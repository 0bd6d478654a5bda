"""Differentiable loss terms: dice+cross-entropy, pixel-wise KL, feature L2.

Per modality the combined self-distillation loss is

    dice_ce + lambda_kl * pixel_kl + gamma_l2 * feature_l2,

and the full training objective adds the fused branch's dice_ce on top of the
per-modality sums. Teacher quantities (the fused logits and fused features)
are gradient-detached inside the distillation terms, so distillation pulls
students toward the teacher and never the reverse.

All functions accept logits with the class channel at dim -4, i.e. both
(C, D, H, W) and (N, C, D, H, W) layouts, and work in whatever floating dtype
the inputs carry (float64 for finite-difference checks).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ExperimentConfig, LabelMap
from .errors import ShapeError
from .model import FeatureBundle, ForwardOutputs


def _as_label_tensor(labels) -> torch.Tensor:
    if isinstance(labels, LabelMap):
        return torch.from_numpy(np.ascontiguousarray(labels.classes)).long()
    if isinstance(labels, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(labels)).long()
    return labels.long()


def _check_logits_vs_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.dim() < 4:
        raise ShapeError(f"logits must be at least rank 4 (C,D,H,W), got {tuple(logits.shape)}")
    expected = logits.shape[:-4] + logits.shape[-3:]
    if tuple(labels.shape) != tuple(expected):
        raise ShapeError(
            f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}"
        )
    if not torch.isfinite(logits).all():
        raise FloatingPointError("logits contain non-finite values")


def _non_channel_dims(t: torch.Tensor) -> tuple[int, ...]:
    ch = t.dim() - 4
    return tuple(d for d in range(t.dim()) if d != ch)


def dice_ce(labels, logits: torch.Tensor, smooth_eps: float = 1e-5) -> torch.Tensor:
    """Soft-dice loss plus cross-entropy, unweighted sum.

    Dice is computed per class (background included) from softmax
    probabilities against one-hot labels, smoothed by ``smooth_eps``, then
    averaged; cross-entropy is the mean per-voxel negative log-likelihood.
    """
    y = _as_label_tensor(labels)
    _check_logits_vs_labels(logits, y)
    ch = logits.dim() - 4
    num_classes = logits.shape[ch]
    if y.numel() and int(y.max()) >= num_classes:
        raise ShapeError(
            f"label value {int(y.max())} out of range for {num_classes} logit channels"
        )
    logp = F.log_softmax(logits, dim=ch)
    ce = -logp.gather(ch, y.unsqueeze(ch)).mean()

    p = logp.exp()
    onehot = F.one_hot(y, num_classes).to(logits.dtype)
    # one_hot puts the class axis last; move it to the channel position
    onehot = torch.movedim(onehot, -1, ch)
    dims = _non_channel_dims(p)
    intersection = (p * onehot).sum(dim=dims)
    denom = p.sum(dim=dims) + onehot.sum(dim=dims)
    per_class = (2.0 * intersection + smooth_eps) / (denom + smooth_eps)
    dice = 1.0 - per_class.mean()
    return dice + ce


def pixel_kl(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Mean per-voxel KL(teacher || student) of temperature-scaled softmaxes.

    The teacher branch is detached: no gradient flows toward the teacher.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher shape {tuple(teacher_logits.shape)} != student {tuple(student_logits.shape)}"
        )
    if teacher_logits.dim() < 4:
        raise ShapeError(f"logits must be at least rank 4, got {tuple(teacher_logits.shape)}")
    ch = teacher_logits.dim() - 4
    log_pt = F.log_softmax(teacher_logits.detach() / temperature, dim=ch)
    log_ps = F.log_softmax(student_logits / temperature, dim=ch)
    kl_per_voxel = (log_pt.exp() * (log_pt - log_ps)).sum(dim=ch)
    # rounding can leave the mean a hair below zero when teacher ~= student
    return kl_per_voxel.mean().clamp_min(0.0)


def feature_l2(student: FeatureBundle, teacher: FeatureBundle) -> torch.Tensor:
    """Squared distance between bundles, summed over levels, per element.

    Normalizing by total element count keeps gamma_l2=1 comparable across
    backbone widths. The teacher bundle is detached.
    """
    if student.shape_signature() != teacher.shape_signature():
        raise ShapeError(
            f"bundle shapes disagree: {student.shape_signature()} vs {teacher.shape_signature()}"
        )
    total_sq = None
    total_n = 0
    for s, t in zip(student.levels, teacher.levels):
        sq = ((s - t.detach()) ** 2).sum()
        total_sq = sq if total_sq is None else total_sq + sq
        total_n += s.numel()
    return total_sq / total_n


@dataclass(frozen=True)
class ModalityLossTerms:
    """The three sub-terms and their weighted combination, as 0-dim tensors."""

    dice_ce: torch.Tensor
    kl: torch.Tensor
    feature_l2: torch.Tensor
    combined: torch.Tensor


def modality_loss(
    labels,
    fused_logits: torch.Tensor,
    student_logits: torch.Tensor,
    student_bundle: FeatureBundle,
    fused_bundle: FeatureBundle,
    lambda_kl: float,
    gamma_l2: float,
    temperature: float = 1.0,
    smooth_eps: float = 1e-5,
) -> ModalityLossTerms:
    """Combined self-distillation loss for one modality branch."""
    dc = dice_ce(labels, student_logits, smooth_eps)
    kl = pixel_kl(fused_logits, student_logits, temperature)
    l2 = feature_l2(student_bundle, fused_bundle)
    combined = dc
    # skip the weighted additions entirely at weight 0 so the degenerate case
    # collapses to dice_ce bit-for-bit
    if lambda_kl != 0.0:
        combined = combined + lambda_kl * kl
    if gamma_l2 != 0.0:
        combined = combined + gamma_l2 * l2
    return ModalityLossTerms(dice_ce=dc, kl=kl, feature_l2=l2, combined=combined)


@dataclass(frozen=True)
class ModalityLossRecord:
    modality: str
    dice_ce: float
    kl: float
    feature_l2: float
    combined: float


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term record of one training step's objective."""

    fused_dice_ce: float
    per_modality: tuple[ModalityLossRecord, ...]
    total: float

    def to_json_dict(self) -> dict:
        return {
            "fused_dice_ce": self.fused_dice_ce,
            "per_modality": [
                {
                    "modality": r.modality,
                    "dice_ce": r.dice_ce,
                    "kl": r.kl,
                    "feature_l2": r.feature_l2,
                    "combined": r.combined,
                }
                for r in self.per_modality
            ],
            "total": self.total,
        }

    def json_line(self, **extra) -> str:
        record = {**extra, **self.to_json_dict()}
        return json.dumps(record, sort_keys=True)


def mag_loss(
    labels, outputs: ForwardOutputs, config: ExperimentConfig
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective: fused dice_ce plus every modality's combined loss.

    Returns the differentiable scalar and a plain-float breakdown for logging.
    """
    modality_set = config.modality_set
    if len(outputs.per_modality_logits) != len(modality_set):
        raise ShapeError(
            f"expected {len(modality_set)} modality branches, got {len(outputs.per_modality_logits)}"
        )
    fused_dc = dice_ce(labels, outputs.fused_logits, config.smooth_eps)
    total = fused_dc
    records = []
    for m in modality_set:
        terms = modality_loss(
            labels,
            outputs.fused_logits,
            outputs.per_modality_logits[m.index],
            outputs.per_modality_bundles[m.index],
            outputs.fused_bundle,
            lambda_kl=config.lambda_kl,
            gamma_l2=config.gamma_l2,
            temperature=config.kl_temperature,
            smooth_eps=config.smooth_eps,
        )
        total = total + terms.combined
        records.append(
            ModalityLossRecord(
                modality=m.name,
                dice_ce=terms.dice_ce.detach().item(),
                kl=terms.kl.detach().item(),
                feature_l2=terms.feature_l2.detach().item(),
                combined=terms.combined.detach().item(),
            )
        )
    breakdown = LossBreakdown(
        fused_dice_ce=fused_dc.detach().item(),
        per_modality=tuple(records),
        total=total.detach().item(),
    )
    return total, breakdown
