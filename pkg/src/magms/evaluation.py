"""Dice and HD95 metrics, the all-subsets sweep, and table/plot emission.

HD95 here is the 95th percentile (linear interpolation) of the pooled
symmetric surface-distance multiset: distances from every predicted boundary
voxel to the nearest ground-truth boundary voxel and vice versa, in mm.
Boundary voxels are foreground voxels with a face-adjacent background
neighbor (6-connectivity, outside the grid counts as background). Classes
empty in both volumes score dice 1.0; empty in exactly one, 0.0; HD95 is
undefined whenever either boundary set is empty.

A sweep consumes exactly one checkpoint and evaluates every non-empty
modality subset on the test split, aggregating mean +/- standard deviation
over subjects.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .baselines import FillStrategy, fill_forward
from .core import ExperimentConfig, LabelMap, ModalitySubset, enumerate_subsets
from .errors import ConfigurationError, ShapeError
from .training import FILL_ARMS, TrainState, load_checkpoint


def _as_class_array(labels) -> np.ndarray:
    if isinstance(labels, LabelMap):
        return labels.classes
    return np.asarray(labels)


def dice_score(pred, gt, num_classes: int) -> np.ndarray:
    """Per-class dice overlap 2|P∩G| / (|P|+|G|), with empty-set conventions."""
    p = _as_class_array(pred)
    g = _as_class_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    out = np.zeros(num_classes, dtype=np.float64)
    for c in range(num_classes):
        pc = p == c
        gc = g == c
        np_c = int(pc.sum())
        ng_c = int(gc.sum())
        if np_c == 0 and ng_c == 0:
            out[c] = 1.0
        elif np_c == 0 or ng_c == 0:
            out[c] = 0.0
        else:
            out[c] = 2.0 * int((pc & gc).sum()) / (np_c + ng_c)
    return out


_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with >= 1 face-adjacent background neighbor."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, border_value=0)
    return mask & ~interior


def hd95(pred, gt, class_id: int, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """95th percentile of pooled symmetric boundary distances in mm, or None."""
    p = _as_class_array(pred)
    g = _as_class_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    pb = boundary_mask(p == class_id)
    gb = boundary_mask(g == class_id)
    if not pb.any() or not gb.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    p_pts = np.argwhere(pb) * scale
    g_pts = np.argwhere(gb) * scale
    d_pg, _ = cKDTree(g_pts).query(p_pts, k=1)
    d_gp, _ = cKDTree(p_pts).query(g_pts, k=1)
    pooled = np.concatenate([d_pg, d_gp])
    return float(np.percentile(pooled, 95, method="linear"))


@dataclass(frozen=True)
class MetricResult:
    """Foreground-class metrics for one prediction vs its ground truth."""

    per_class_dice: tuple[float, ...]
    per_class_hd95: tuple[float | None, ...]
    mean_dice: float
    mean_hd95: float | None


def evaluate_prediction(pred, gt: LabelMap, spacing=(1.0, 1.0, 1.0)) -> MetricResult:
    """Per-foreground-class dice and HD95, plus their means."""
    num_classes = gt.num_classes
    dices = dice_score(pred, gt, num_classes)
    fg_dice = tuple(float(d) for d in dices[1:])
    fg_hd = tuple(hd95(pred, gt, c, spacing) for c in range(1, num_classes))
    defined = [h for h in fg_hd if h is not None]
    return MetricResult(
        per_class_dice=fg_dice,
        per_class_hd95=fg_hd,
        mean_dice=float(np.mean(fg_dice)),
        mean_hd95=float(np.mean(defined)) if defined else None,
    )


@dataclass(frozen=True)
class SubsetRow:
    """Aggregated metrics for one modality subset over the evaluated subjects."""

    subset: ModalitySubset
    n_subjects: int
    mean_dice: float
    std_dice: float
    mean_hd95: float | None
    std_hd95: float | None
    per_class_dice_mean: tuple[float, ...]
    per_class_dice_std: tuple[float, ...]
    per_class_hd95_mean: tuple[float | None, ...]
    per_class_hd95_std: tuple[float | None, ...]


@dataclass(frozen=True)
class SweepReport:
    """One row per non-empty subset, in enumeration order, from one checkpoint."""

    rows: tuple[SubsetRow, ...]
    modalities: tuple[str, ...]
    num_classes: int
    checkpoint: str
    config_hash: str
    arm: str

    def row_for(self, subset_label: str) -> SubsetRow:
        for row in self.rows:
            if row.subset.label() == subset_label:
                return row
        raise KeyError(f"no row for subset {subset_label!r}")

    def full_subset_row(self) -> SubsetRow:
        return self.rows[-1]


def _mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def predict_subset(state: TrainState, sample, subset: ModalitySubset) -> np.ndarray:
    """Argmax class map from the arm-appropriate forward pass."""
    with torch.no_grad():
        if state.arm in FILL_ARMS:
            strategy = (
                FillStrategy.ZEROS if state.arm == "zero_fill" else FillStrategy.DATASET_MEAN
            )
            logits = fill_forward(state.model, sample, subset, strategy, state.mean_volumes)
        else:
            logits = state.model.forward_subset(sample, subset)
    return logits.argmax(dim=0).numpy().astype(np.uint8)


def sweep_subsets(checkpoint, dataset, split: str = "test") -> SweepReport:
    """Evaluate every non-empty modality subset of one checkpoint on a split."""
    if isinstance(checkpoint, TrainState):
        state, ckpt_name = checkpoint, f"<in-memory iter {checkpoint.iteration}>"
    else:
        state, ckpt_name = load_checkpoint(checkpoint), str(checkpoint)
    config = state.config
    missing = [n for n in config.modalities if n not in dataset.modality_set.names]
    if missing:
        raise ConfigurationError(
            f"dataset lacks modalities required by the checkpoint: {missing}"
        )
    if dataset.num_classes != config.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes, checkpoint expects {config.num_classes}"
        )
    samples = [_remap_sample(s, config) for s in dataset.split(split)]
    if not samples:
        raise ConfigurationError(f"split {split!r} is empty")
    state.model.eval()
    rows = []
    for subset in enumerate_subsets(config.modality_set):
        results = []
        for sample in samples:
            pred = predict_subset(state, sample, subset)
            results.append(evaluate_prediction(pred, sample.labels, sample.spacing))
        n_fg = config.num_classes - 1
        mean_dice, std_dice = _mean_std([r.mean_dice for r in results])
        mean_hd, std_hd = _mean_std([r.mean_hd95 for r in results])
        pc_d = [_mean_std([r.per_class_dice[c] for r in results]) for c in range(n_fg)]
        pc_h = [_mean_std([r.per_class_hd95[c] for r in results]) for c in range(n_fg)]
        rows.append(
            SubsetRow(
                subset=subset,
                n_subjects=len(samples),
                mean_dice=mean_dice,
                std_dice=std_dice,
                mean_hd95=mean_hd,
                std_hd95=std_hd,
                per_class_dice_mean=tuple(m for m, _ in pc_d),
                per_class_dice_std=tuple(s for _, s in pc_d),
                per_class_hd95_mean=tuple(m for m, _ in pc_h),
                per_class_hd95_std=tuple(s for _, s in pc_h),
            )
        )
    return SweepReport(
        rows=tuple(rows),
        modalities=config.modalities,
        num_classes=config.num_classes,
        checkpoint=ckpt_name,
        config_hash=config.content_hash(),
        arm=state.arm,
    )


def _remap_sample(sample, config: ExperimentConfig):
    """Restrict a sample to the checkpoint's modalities (dataset may be a superset)."""
    if sample.modality_set.names == tuple(config.modalities):
        return sample
    from .data import MultiModalSample

    target = config.modality_set
    by_name = {m.name: m for m in sample.modality_set}
    volumes = {}
    for m in target:
        src = sample.volume(by_name[m.name])
        volumes[m] = type(src)(modality=m, voxels=src.voxels, spacing=src.spacing)
    return MultiModalSample(volumes=volumes, labels=sample.labels, subject_id=sample.subject_id)


def _fmt(value: float | None, digits: int = 6) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def report_to_csv(report: SweepReport) -> str:
    """Long-form CSV: one row per (subset, metric, class aggregation)."""
    buf = io.StringIO()
    marker_cols = ",".join(f"has_{name}" for name in report.modalities)
    buf.write(f"subset,size,{marker_cols},metric,class,mean,std,n\n")
    class_names = ["mean"] + [f"c{c}" for c in range(1, report.num_classes)]
    for row in report.rows:
        avail = [1 if name in row.subset.names else 0 for name in report.modalities]
        prefix = f"{row.subset.label()},{len(row.subset)},{','.join(map(str, avail))}"
        dice_vals = [(row.mean_dice, row.std_dice)] + list(
            zip(row.per_class_dice_mean, row.per_class_dice_std)
        )
        hd_vals = [(row.mean_hd95, row.std_hd95)] + list(
            zip(row.per_class_hd95_mean, row.per_class_hd95_std)
        )
        for cname, (m, s) in zip(class_names, dice_vals):
            buf.write(f"{prefix},dice,{cname},{_fmt(m)},{_fmt(s)},{row.n_subjects}\n")
        for cname, (m, s) in zip(class_names, hd_vals):
            buf.write(f"{prefix},hd95,{cname},{_fmt(m)},{_fmt(s)},{row.n_subjects}\n")
    return buf.getvalue()


def report_to_markdown(report: SweepReport) -> str:
    """Availability-marker table in the usual benchmark layout."""
    buf = io.StringIO()
    buf.write(f"Checkpoint: `{report.checkpoint}` (arm `{report.arm}`, config `{report.config_hash}`)\n\n")
    fg_names = [f"C{c}" for c in range(1, report.num_classes)]
    header = (
        "| " + " | ".join(report.modalities)
        + " | Mean Dice | " + " | ".join(f"Dice {n}" for n in fg_names)
        + " | Mean HD95 |\n"
    )
    buf.write(header)
    buf.write("|" + "---|" * (len(report.modalities) + len(fg_names) + 2) + "\n")
    for row in report.rows:
        markers = [
            "•" if name in row.subset.names else "○" for name in report.modalities
        ]
        cells = [f"{row.mean_dice:.3f} ± {row.std_dice:.3f}"]
        for m, s in zip(row.per_class_dice_mean, row.per_class_dice_std):
            cells.append(f"{m:.3f} ± {s:.3f}")
        if row.mean_hd95 is None:
            cells.append("n/a")
        else:
            cells.append(f"{row.mean_hd95:.3f} ± {row.std_hd95:.3f}")
        buf.write("| " + " | ".join(markers + cells) + " |\n")
    return buf.getvalue()


def save_plots(report: SweepReport, out_dir) -> list[Path]:
    """Bar plots of mean dice / HD95 per subset; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [row.subset.label() for row in report.rows]
    paths = []

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels)), 4))
    ax.bar(
        range(len(labels)),
        [row.mean_dice for row in report.rows],
        yerr=[row.std_dice for row in report.rows],
        capsize=3,
        color="#4878cf",
    )
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean foreground dice")
    ax.set_ylim(0, 1)
    ax.set_title(f"Subset sweep ({report.arm})")
    fig.tight_layout()
    dice_path = out_dir / "sweep_dice.png"
    fig.savefig(dice_path, dpi=120)
    plt.close(fig)
    paths.append(dice_path)

    hd_rows = [(l, r) for l, r in zip(labels, report.rows) if r.mean_hd95 is not None]
    if hd_rows:
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(hd_rows)), 4))
        ax.bar(
            range(len(hd_rows)),
            [r.mean_hd95 for _, r in hd_rows],
            yerr=[r.std_hd95 for _, r in hd_rows],
            capsize=3,
            color="#d65f5f",
        )
        ax.set_xticks(range(len(hd_rows)))
        ax.set_xticklabels([l for l, _ in hd_rows], rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("mean HD95 (mm)")
        ax.set_title(f"Subset sweep ({report.arm})")
        fig.tight_layout()
        hd_path = out_dir / "sweep_hd95.png"
        fig.savefig(hd_path, dpi=120)
        plt.close(fig)
        paths.append(hd_path)
    return paths


def render_report(report: SweepReport, formats, out_dir=None) -> dict[str, str | list]:
    """Emit the requested formats; writes files when out_dir is given."""
    known = {"csv", "md", "plots"}
    wanted = [f.strip() for f in (formats.split(",") if isinstance(formats, str) else formats)]
    unknown = [f for f in wanted if f not in known]
    if unknown:
        raise ConfigurationError(f"unknown report format(s) {unknown}; choose from {sorted(known)}")
    artifacts: dict[str, str | list] = {}
    if "csv" in wanted:
        artifacts["csv"] = report_to_csv(report)
    if "md" in wanted:
        artifacts["md"] = report_to_markdown(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in artifacts:
            (out_dir / "sweep.csv").write_text(artifacts["csv"])
        if "md" in artifacts:
            (out_dir / "sweep.md").write_text(artifacts["md"])
        if "plots" in wanted:
            artifacts["plots"] = [str(p) for p in save_plots(report, out_dir)]
    elif "plots" in wanted:
        raise ConfigurationError("plot output needs an out_dir")
    return artifacts
