"""Synthetic multi-modal phantom generation and the on-disk dataset format.

A phantom subject is a set of random non-overlapping ellipsoids, one per
foreground class, rendered into each modality with a per-(modality, class)
contrast from the visibility matrix plus Gaussian noise. Complementary
visibility rows make the dataset genuinely multi-modal: no single modality
sees every structure well, so fusing modalities carries real information.

On disk a dataset is a flat directory: ``manifest.json`` plus one raw
little-endian float32 file per volume (``{subject}_{modality}.f32``, C-order
D,H,W) and one uint8 label file per subject (``{subject}_labels.u8``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LabelMap, ModalityId, ModalitySet, ModalityVolume, derive_seed
from .errors import ConfigurationError, DataError, DatasetFormatError, GenerationError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

# A structure counts as visible in a modality when its contrast clears the
# default noise floor by a comfortable margin.
VISIBILITY_THRESHOLD = 0.2

# Generated foreground structures must keep the dice loss informative:
# not vanishing, not dominating.
MIN_CLASS_FRACTION = 0.01
MAX_CLASS_FRACTION = 0.20


@dataclass(frozen=True)
class MultiModalSample:
    """Aligned volumes for every configured modality plus the composite labels."""

    volumes: dict[ModalityId, ModalityVolume]
    labels: LabelMap
    subject_id: str

    def __post_init__(self):
        if not self.volumes:
            raise DataError(f"sample {self.subject_id!r} has no volumes")
        indices = sorted(m.index for m in self.volumes)
        if indices != list(range(len(self.volumes))):
            raise DataError(
                f"sample {self.subject_id!r} must carry all modalities 0..{len(self.volumes) - 1}, "
                f"got indices {indices}"
            )
        shapes = {v.shape for v in self.volumes.values()} | {self.labels.shape}
        if len(shapes) != 1:
            raise DataError(f"sample {self.subject_id!r} mixes shapes: {sorted(shapes)}")
        spacings = {v.spacing for v in self.volumes.values()}
        if len(spacings) != 1:
            raise DataError(f"sample {self.subject_id!r} mixes spacings: {sorted(spacings)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return next(iter(self.volumes.values())).spacing

    @property
    def modality_set(self) -> ModalitySet:
        mods = sorted(self.volumes, key=lambda m: m.index)
        return ModalitySet(tuple(mods))

    def volume(self, modality: ModalityId) -> ModalityVolume:
        try:
            return self.volumes[modality]
        except KeyError:
            raise DataError(
                f"sample {self.subject_id!r} has no volume for modality {modality.name!r}"
            ) from None


def default_visibility(num_modalities: int, num_classes: int) -> np.ndarray:
    """Complementary visibility matrix V[m][c] in [0, 1].

    Each foreground class has one primary modality (contrast 1.0), one
    secondary (0.3), and is nearly invisible elsewhere (0.05); assignments
    cycle so every modality is primary or secondary for something.
    Background column is 0.
    """
    v = np.zeros((num_modalities, num_classes), dtype=np.float64)
    for c in range(1, num_classes):
        j = c - 1
        v[:, c] = 0.05
        v[j % num_modalities, c] = 1.0
        v[(j + 1) % num_modalities, c] = 0.3
    return v


@dataclass(frozen=True)
class PhantomSpec:
    """Generator recipe for one synthetic dataset."""

    modalities: tuple[str, ...]
    grid_size: int = 32
    num_classes: int = 4
    visibility: np.ndarray | None = None
    noise_sigma: float = 0.08
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(str(n) for n in self.modalities))
        if not self.modalities:
            raise ConfigurationError("phantom needs at least one modality")
        if self.num_classes < 2:
            raise ConfigurationError("phantom needs background plus >= 1 structure class")
        if self.grid_size < 8:
            raise ConfigurationError(f"grid_size {self.grid_size} too small for structures")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        m, c = len(self.modalities), self.num_classes
        vis = self.visibility
        if vis is None:
            vis = default_visibility(m, c)
        vis = np.asarray(vis, dtype=np.float64)
        if vis.shape != (m, c):
            raise ConfigurationError(
                f"visibility must be shaped (modalities={m}, classes={c}), got {vis.shape}"
            )
        if np.any(vis < 0) or np.any(vis > 1):
            raise ConfigurationError("visibility entries must lie in [0, 1]")
        fg = vis[:, 1:]
        if np.any(fg.max(axis=1) < VISIBILITY_THRESHOLD):
            raise ConfigurationError("every modality must see at least one structure class")
        if np.any(fg.max(axis=0) < VISIBILITY_THRESHOLD):
            raise ConfigurationError("every structure class must be visible in some modality")
        vis.setflags(write=False)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def modality_set(self) -> ModalitySet:
        return ModalitySet.from_names(self.modalities)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "grid_size": self.grid_size,
            "num_classes": self.num_classes,
            "visibility": self.visibility.tolist(),
            "noise_sigma": self.noise_sigma,
            "spacing": list(self.spacing),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        return cls(
            modalities=tuple(data["modalities"]),
            grid_size=int(data["grid_size"]),
            num_classes=int(data["num_classes"]),
            visibility=np.asarray(data["visibility"], dtype=np.float64),
            noise_sigma=float(data["noise_sigma"]),
            spacing=tuple(data["spacing"]),
            seed=int(data["seed"]),
        )


@dataclass
class Dataset:
    """An in-memory dataset with train/val/test subject splits."""

    samples: list[MultiModalSample]
    modality_set: ModalitySet
    num_classes: int
    splits: dict[str, list[str]]
    generator_spec: dict | None = None

    def split(self, name: str) -> list[MultiModalSample]:
        if name not in self.splits:
            raise ConfigurationError(f"unknown split {name!r}; have {sorted(self.splits)}")
        wanted = set(self.splits[name])
        return [s for s in self.samples if s.subject_id in wanted]

    def __len__(self) -> int:
        return len(self.samples)


def default_splits(subject_ids: list[str]) -> dict[str, list[str]]:
    """Deterministic train/val/test partition, roughly 12/2/4 out of 18."""
    n = len(subject_ids)
    if n < 3:
        raise ConfigurationError(f"need >= 3 subjects to split, got {n}")
    n_val = max(1, round(n * 2 / 18))
    n_test = max(1, round(n * 4 / 18))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n - 2, 1, 1
    return {
        "train": subject_ids[:n_train],
        "val": subject_ids[n_train : n_train + n_val],
        "test": subject_ids[n_train + n_val :],
    }


def _rasterize_ellipsoid(grid: int, center, semi_axes) -> np.ndarray:
    coords = np.arange(grid, dtype=np.float64)
    dz = (coords[:, None, None] - center[0]) / semi_axes[0]
    dy = (coords[None, :, None] - center[1]) / semi_axes[1]
    dx = (coords[None, None, :] - center[2]) / semi_axes[2]
    return (dz**2 + dy**2 + dx**2) <= 1.0


def _place_structures(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping ellipsoid label map; retries packing before giving up."""
    grid = spec.grid_size
    n_fg = spec.num_classes - 1
    total = grid**3
    # semi-axis range tuned so each structure lands inside the 1%..20% band
    lo = max(1.5, grid * 0.10)
    hi = grid * 0.18
    for _attempt in range(40):
        labels = np.zeros((grid, grid, grid), dtype=np.uint8)
        occupied = np.zeros_like(labels, dtype=bool)
        ok = True
        for cls in range(1, spec.num_classes):
            placed = False
            for _try in range(60):
                semi = rng.uniform(lo, hi, size=3)
                margin = semi + 1.0
                if np.any(margin * 2 >= grid):
                    continue
                center = rng.uniform(margin, grid - 1 - margin, size=3)
                mask = _rasterize_ellipsoid(grid, center, semi)
                frac = mask.sum() / total
                if not (MIN_CLASS_FRACTION <= frac <= MAX_CLASS_FRACTION):
                    continue
                if np.any(mask & occupied):
                    continue
                labels[mask] = cls
                occupied |= mask
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return labels
    raise GenerationError(
        f"could not pack {n_fg} non-overlapping structures into a {grid}^3 grid"
    )


def generate_subject(spec: PhantomSpec, subject_index: int) -> MultiModalSample:
    """One phantom subject, deterministic in (spec.seed, subject_index)."""
    rng = np.random.default_rng([derive_seed(spec.seed, "subject", subject_index)])
    labels_arr = _place_structures(spec, rng)
    modality_set = spec.modality_set
    volumes = {}
    for m in modality_set:
        intensity = np.zeros(labels_arr.shape, dtype=np.float64)
        for cls in range(spec.num_classes):
            contrast = spec.visibility[m.index, cls]
            if contrast != 0.0:
                intensity[labels_arr == cls] += contrast
        if spec.noise_sigma > 0:
            intensity += rng.normal(0.0, spec.noise_sigma, size=labels_arr.shape)
        volumes[m] = ModalityVolume(
            modality=m, voxels=intensity.astype(np.float32), spacing=spec.spacing
        )
    return MultiModalSample(
        volumes=volumes,
        labels=LabelMap(labels_arr, spec.num_classes),
        subject_id=f"subj{subject_index:03d}",
    )


def generate_phantom(spec: PhantomSpec, n_subjects: int) -> Dataset:
    """Generate a full phantom dataset with default splits."""
    if n_subjects < 1:
        raise ConfigurationError(f"n_subjects must be >= 1, got {n_subjects}")
    samples = [generate_subject(spec, i) for i in range(n_subjects)]
    for s in samples:
        _check_prevalence(s, spec.num_classes)
    if n_subjects >= 3:
        splits = default_splits([s.subject_id for s in samples])
    else:
        splits = {"train": [s.subject_id for s in samples], "val": [], "test": []}
    return Dataset(
        samples=samples,
        modality_set=spec.modality_set,
        num_classes=spec.num_classes,
        splits=splits,
        generator_spec=spec.to_dict(),
    )


def _check_prevalence(sample: MultiModalSample, num_classes: int) -> None:
    total = sample.labels.classes.size
    for cls in range(1, num_classes):
        frac = (sample.labels.classes == cls).sum() / total
        if not (MIN_CLASS_FRACTION <= frac <= MAX_CLASS_FRACTION):
            raise GenerationError(
                f"class {cls} occupies {frac:.2%} of {sample.subject_id}, "
                f"outside [{MIN_CLASS_FRACTION:.0%}, {MAX_CLASS_FRACTION:.0%}]"
            )


def random_flips(sample: MultiModalSample, rng: np.random.Generator) -> MultiModalSample:
    """Training augmentation: flip each spatial axis with p=0.5, labels included."""
    axes = [ax for ax in range(3) if rng.random() < 0.5]
    if not axes:
        return sample
    volumes = {
        m: ModalityVolume(m, np.flip(v.voxels, axis=axes).copy(), v.spacing)
        for m, v in sample.volumes.items()
    }
    labels = LabelMap(np.flip(sample.labels.classes, axis=axes).copy(), sample.labels.num_classes)
    return MultiModalSample(volumes=volumes, labels=labels, subject_id=sample.subject_id)


def _volume_filename(subject_id: str, modality_name: str) -> str:
    return f"{subject_id}_{modality_name}.f32"


def _labels_filename(subject_id: str) -> str:
    return f"{subject_id}_labels.u8"


def write_dataset(dataset: Dataset, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    shape = dataset.samples[0].shape
    spacing = dataset.samples[0].spacing
    manifest = {
        "format_version": FORMAT_VERSION,
        "modalities": list(dataset.modality_set.names),
        "num_classes": dataset.num_classes,
        "shape": list(shape),
        "spacing": list(spacing),
        "subjects": [s.subject_id for s in dataset.samples],
        "splits": dataset.splits,
        "generator": dataset.generator_spec,
    }
    for sample in dataset.samples:
        for m, vol in sorted(sample.volumes.items(), key=lambda kv: kv[0].index):
            data = np.ascontiguousarray(vol.voxels, dtype="<f4")
            (out / _volume_filename(sample.subject_id, m.name)).write_bytes(data.tobytes())
        (out / _labels_filename(sample.subject_id)).write_bytes(
            np.ascontiguousarray(sample.labels.classes, dtype=np.uint8).tobytes()
        )
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetFormatError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format_version {manifest.get('format_version')!r} in {manifest_path}"
        )
    modality_set = ModalitySet.from_names(manifest["modalities"])
    num_classes = int(manifest["num_classes"])
    shape = tuple(int(x) for x in manifest["shape"])
    spacing = tuple(float(x) for x in manifest["spacing"])
    n_voxels = int(np.prod(shape))
    samples = []
    for subject_id in manifest["subjects"]:
        volumes = {}
        for m in modality_set:
            fpath = root / _volume_filename(subject_id, m.name)
            if not fpath.is_file():
                raise DatasetFormatError(f"manifest lists {fpath.name} but the file is missing")
            raw = fpath.read_bytes()
            if len(raw) != n_voxels * 4:
                raise DatasetFormatError(
                    f"{fpath.name}: expected {n_voxels * 4} bytes for shape {shape}, got {len(raw)}"
                )
            vox = np.frombuffer(raw, dtype="<f4").reshape(shape)
            volumes[m] = ModalityVolume(m, vox.copy(), spacing)
        lpath = root / _labels_filename(subject_id)
        if not lpath.is_file():
            raise DatasetFormatError(f"manifest lists {lpath.name} but the file is missing")
        raw = lpath.read_bytes()
        if len(raw) != n_voxels:
            raise DatasetFormatError(
                f"{lpath.name}: expected {n_voxels} bytes for shape {shape}, got {len(raw)}"
            )
        labels = LabelMap(np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy(), num_classes)
        samples.append(MultiModalSample(volumes=volumes, labels=labels, subject_id=subject_id))
    return Dataset(
        samples=samples,
        modality_set=modality_set,
        num_classes=num_classes,
        splits={k: list(v) for k, v in manifest["splits"].items()},
        generator_spec=manifest.get("generator"),
    )
