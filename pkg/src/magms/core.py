"""Shared domain vocabulary: modalities, subsets, volumes, labels, configuration.

Everything here is immutable after construction and safe to share between
concurrent readers. Intensities are float32, labels uint8 throughout.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

DEFAULT_MODALITY_NAMES = ("T1", "T2", "T1c", "FLAIR")


@dataclass(frozen=True, order=True)
class ModalityId:
    """One imaging modality/sequence, identified by a contiguous index."""

    index: int
    name: str

    def __post_init__(self):
        if self.index < 0:
            raise ConfigurationError(f"modality index must be >= 0, got {self.index}")
        if not self.name:
            raise ConfigurationError("modality name must be non-empty")


@dataclass(frozen=True)
class ModalitySet:
    """The full ordered collection of modalities an experiment is configured for."""

    modalities: tuple[ModalityId, ...]

    def __post_init__(self):
        if not self.modalities:
            raise ConfigurationError("modality set must be non-empty")
        indices = [m.index for m in self.modalities]
        if indices != list(range(len(self.modalities))):
            raise ConfigurationError(
                f"modality indices must be contiguous from 0, got {indices}"
            )
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"modality names must be unique, got {names}")

    @classmethod
    def from_names(cls, names) -> "ModalitySet":
        return cls(tuple(ModalityId(i, str(n)) for i, n in enumerate(names)))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modalities)

    def __len__(self) -> int:
        return len(self.modalities)

    def __iter__(self):
        return iter(self.modalities)

    def __contains__(self, modality: ModalityId) -> bool:
        return modality in self.modalities

    def by_name(self, name: str) -> ModalityId:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigurationError(f"unknown modality name {name!r}; have {self.names}")

    def full_subset(self) -> "ModalitySubset":
        return ModalitySubset(self.modalities)


@dataclass(frozen=True)
class ModalitySubset:
    """A non-empty subset of a ModalitySet; iteration order is ascending index."""

    members: tuple[ModalityId, ...]

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("modality subset must be non-empty")
        indices = [m.index for m in self.members]
        if len(set(indices)) != len(indices):
            raise ConfigurationError(f"duplicate modalities in subset: {indices}")
        if indices != sorted(indices):
            # normalize to ascending index so iteration order is deterministic
            object.__setattr__(
                self, "members", tuple(sorted(self.members, key=lambda m: m.index))
            )

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(m.index for m in self.members)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.members)

    def label(self) -> str:
        return "+".join(self.names)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, modality: ModalityId) -> bool:
        return modality in self.members


def enumerate_subsets(modality_set: ModalitySet) -> list[ModalitySubset]:
    """All 2^|M|-1 non-empty subsets, ordered by cardinality then lexicographic index.

    The ordering is fixed so that sweep-report rows are reproducible across runs:
    singles first, then pairs, ..., then the full set.
    """
    if len(modality_set) < 1:
        raise ConfigurationError("cannot enumerate subsets of an empty modality set")
    mods = modality_set.modalities
    out = []
    for size in range(1, len(mods) + 1):
        for combo in itertools.combinations(mods, size):
            out.append(ModalitySubset(combo))
    return out


@dataclass(frozen=True)
class ModalityVolume:
    """One modality's 3D image for one subject; voxels float32, spacing in mm."""

    modality: ModalityId
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ShapeError(f"volume must be rank-3 (D,H,W), got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise DataError(f"volume for {self.modality.name} contains non-finite values")
        object.__setattr__(self, "voxels", vox)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ConfigurationError(f"spacing must be 3 positive lengths, got {spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMap:
    """Composite ground-truth segmentation shared by all modalities of a subject."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 3:
            raise ShapeError(f"label map must be rank-3 (D,H,W), got shape {arr.shape}")
        if self.num_classes < 1 or self.num_classes > 255:
            raise ConfigurationError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if arr.size and int(arr.max()) >= self.num_classes:
            raise DataError(
                f"label value {int(arr.max())} out of range for {self.num_classes} classes"
            )
        if arr.size and int(arr.min()) < 0:
            raise DataError("label values must be non-negative")
        object.__setattr__(self, "classes", arr.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.classes.shape


# Keys accepted in the serialized config file; anything else is a typo and rejected.
_CONFIG_FIELDS = (
    "modalities",
    "num_classes",
    "lambda_kl",
    "gamma_l2",
    "kl_temperature",
    "encoder_widths",
    "learning_rate",
    "iterations",
    "batch_size",
    "seed",
    "smooth_eps",
    "augment",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Hyperparameters shared by model construction, training, and evaluation.

    lambda_kl / gamma_l2 weight the KL and feature-L2 distillation terms; both
    default to 1. Setting both to 0 disables self-distillation entirely (the
    plain modality-agnostic ablation arm).
    """

    modalities: tuple[str, ...] = DEFAULT_MODALITY_NAMES
    num_classes: int = 4
    lambda_kl: float = 1.0
    gamma_l2: float = 1.0
    kl_temperature: float = 1.0
    encoder_widths: tuple[int, ...] = (8, 16)
    learning_rate: float = 1e-3
    iterations: int = 200
    batch_size: int = 2
    seed: int = 0
    smooth_eps: float = 1e-5
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(str(n) for n in self.modalities))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if not self.modalities:
            raise ConfigurationError("config needs at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigurationError(f"duplicate modality names: {self.modalities}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.lambda_kl < 0 or self.gamma_l2 < 0:
            raise ConfigurationError("lambda_kl and gamma_l2 must be non-negative")
        if self.kl_temperature <= 0:
            raise ConfigurationError("kl_temperature must be positive")
        if len(self.encoder_widths) < 1 or any(w < 1 for w in self.encoder_widths):
            raise ConfigurationError(f"bad encoder widths {self.encoder_widths}")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.smooth_eps <= 0:
            raise ConfigurationError("smooth_eps must be positive")

    @property
    def modality_set(self) -> ModalitySet:
        return ModalitySet.from_names(self.modalities)

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "num_classes": self.num_classes,
            "lambda_kl": self.lambda_kl,
            "gamma_l2": self.gamma_l2,
            "kl_temperature": self.kl_temperature,
            "encoder_widths": list(self.encoder_widths),
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "smooth_eps": self.smooth_eps,
            "augment": self.augment,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "modalities" in kwargs:
            kwargs["modalities"] = tuple(kwargs["modalities"])
        if "encoder_widths" in kwargs:
            kwargs["encoder_widths"] = tuple(kwargs["encoder_widths"])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def derive_seed(base_seed: int, *labels) -> int:
    """Stable labeled seed splitting: one root seed fans out to sub-streams.

    Hashing (seed, labels...) keeps every consumer's stream independent of the
    order in which other consumers draw.
    """
    key = ":".join([str(int(base_seed))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
