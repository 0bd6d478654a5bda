"""Numerical verifier for the entropy / KL upper-bound inequality.

The claim, in the scalar-likelihood form its derivation uses: whenever the
all-modality likelihood p_M exceeds the subset likelihood p_S,

    -p_S ln p_S  <  -p_M ln p_M + p_M ln(p_M / p_S),

i.e. the subset entropy is bounded above by the all-modality entropy plus the
KL term. ``verify_entropy_bound`` evaluates one pair, ``sweep_bound`` samples
many, and ``distillation_tightens_bound`` measures the empirical mechanism on
trained checkpoints: distillation training minimizes the KL between fused and
subset outputs, which is the quantity that tightens the bound.

All entropies are in nats. The precondition p_M > p_S is a modeling postulate
and is enforced at construction rather than tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ModalitySubset, derive_seed
from .errors import ConfigurationError


@dataclass(frozen=True)
class ScalarLikelihoodPair:
    """Likelihoods of the all-modality model (p_M) and a subset model (p_S)."""

    p_M: float
    p_S: float

    def __post_init__(self):
        if not (0.0 < self.p_M <= 1.0):
            raise ConfigurationError(f"p_M must lie in (0, 1], got {self.p_M}")
        if not (0.0 < self.p_S < 1.0):
            raise ConfigurationError(f"p_S must lie in (0, 1), got {self.p_S}")
        if not self.p_M > self.p_S:
            raise ConfigurationError(
                f"requires p_M > p_S strictly, got p_M={self.p_M}, p_S={self.p_S}"
            )


@dataclass(frozen=True)
class BoundCheck:
    """One evaluation of the inequality h_S < h_M + d_kl (all in nats)."""

    p_M: float
    p_S: float
    h_S: float
    h_M: float
    d_kl: float

    @property
    def bound(self) -> float:
        return self.h_M + self.d_kl

    @property
    def holds(self) -> bool:
        return self.h_S < self.bound


def scalar_entropy(p: float) -> float:
    """-p ln p, the single-likelihood entropy contribution."""
    return -p * math.log(p)


def verify_entropy_bound(pair: ScalarLikelihoodPair) -> BoundCheck:
    """Evaluate the bound for one likelihood pair."""
    h_S = scalar_entropy(pair.p_S)
    h_M = scalar_entropy(pair.p_M)
    d_kl = pair.p_M * math.log(pair.p_M / pair.p_S)
    return BoundCheck(p_M=pair.p_M, p_S=pair.p_S, h_S=h_S, h_M=h_M, d_kl=d_kl)


def sample_pairs(n: int, seed: int = 0) -> list[ScalarLikelihoodPair]:
    """n likelihood pairs drawn uniformly from {0 < p_S < p_M < 1}."""
    if n < 1:
        raise ConfigurationError(f"need n >= 1 samples, got {n}")
    rng = np.random.default_rng([derive_seed(seed, "bound-sweep")])
    pairs = []
    while len(pairs) < n:
        a, b = rng.random(), rng.random()
        lo, hi = (a, b) if a < b else (b, a)
        if lo <= 0.0 or hi >= 1.0 or lo == hi:
            continue
        pairs.append(ScalarLikelihoodPair(p_M=hi, p_S=lo))
    return pairs


def sweep_bound(n: int, seed: int = 0) -> float:
    """Fraction of n sampled pairs for which the bound holds (expected 1.0)."""
    checks = [verify_entropy_bound(p) for p in sample_pairs(n, seed)]
    return sum(1 for c in checks if c.holds) / n


@dataclass(frozen=True)
class TighteningComparison:
    """Empirical entropy/KL of subset-S outputs for two checkpoints.

    ``kl`` is the mean per-voxel KL(fused || subset) on the evaluated split,
    the directly optimized distillation quantity; ``entropy`` is the mean
    per-voxel predictive entropy. The '_with' arm trained with distillation,
    '_without' is the ablation.
    """

    subset_label: str
    entropy_with: float
    entropy_without: float
    kl_with: float
    kl_without: float

    @property
    def kl_reduced(self) -> bool:
        return self.kl_with < self.kl_without

    @property
    def entropy_reduced(self) -> bool:
        return self.entropy_with < self.entropy_without


def _predictive_stats(model, sample, subset: ModalitySubset) -> tuple[float, float]:
    """(mean per-voxel entropy of subset output, mean KL(fused || subset))."""
    with torch.no_grad():
        logits_s = model.forward_subset(sample, subset)
        logits_m = model.forward_subset(sample, model.modality_set.full_subset())
        log_ps = F.log_softmax(logits_s, dim=0)
        log_pm = F.log_softmax(logits_m, dim=0)
        entropy = float(-(log_ps.exp() * log_ps).sum(dim=0).mean())
        kl = float((log_pm.exp() * (log_pm - log_ps)).sum(dim=0).mean())
    return entropy, max(kl, 0.0)


def distillation_tightens_bound(
    model_with, model_without, samples, subset: ModalitySubset
) -> TighteningComparison:
    """Compare predictive entropy and fused->subset KL across the two arms.

    The two models must share every config field except the distillation
    weights lambda_kl / gamma_l2.
    """
    cfg_a = model_with.config.with_overrides(lambda_kl=0.0, gamma_l2=0.0)
    cfg_b = model_without.config.with_overrides(lambda_kl=0.0, gamma_l2=0.0)
    if cfg_a != cfg_b:
        raise ConfigurationError(
            "checkpoints differ beyond lambda_kl/gamma_l2; comparison is not meaningful"
        )
    if not samples:
        raise ConfigurationError("need at least one evaluation sample")
    ent_w, ent_wo, kl_w, kl_wo = [], [], [], []
    for sample in samples:
        e, k = _predictive_stats(model_with, sample, subset)
        ent_w.append(e)
        kl_w.append(k)
        e, k = _predictive_stats(model_without, sample, subset)
        ent_wo.append(e)
        kl_wo.append(k)
    return TighteningComparison(
        subset_label=subset.label(),
        entropy_with=float(np.mean(ent_w)),
        entropy_without=float(np.mean(ent_wo)),
        kl_with=float(np.mean(kl_w)),
        kl_without=float(np.mean(kl_wo)),
    )
