"""Single-model training loop, arm dispatch, and checkpoint round-tripping.

One iteration forwards every modality branch plus the fused branch, computes
the full objective, and applies one Adam update. Batch composition,
augmentation flips, and baseline subset draws are all pure functions of
(seed, iteration), so an interrupted run resumed from a checkpoint replays
the exact trajectory of the uninterrupted one.

Checkpoints are deterministic zip archives: config.json, meta.json, and every
parameter / optimizer-moment array as raw little-endian float32 keyed by its
hierarchical module name. Saving the same state twice yields byte-identical
files.
"""

from __future__ import annotations

import contextlib
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .core import ExperimentConfig, derive_seed
from .data import Dataset, MultiModalSample, random_flips
from .errors import CheckpointError, ConfigurationError, DataError, NonFiniteLossError
from .losses import LossBreakdown, dice_ce, mag_loss
from .model import (
    MagModel,
    MultiChannelModel,
    build_model,
    build_multichannel_model,
    labels_to_tensor,
    volume_to_tensor,
)

CHECKPOINT_FORMAT_VERSION = 1

ARMS = ("magms", "mag", "zero_fill", "mean_fill", "dropout_mean")
MAG_ARMS = ("magms", "mag", "dropout_mean")
FILL_ARMS = ("zero_fill", "mean_fill")


@dataclass
class TrainState:
    """Model + optimizer + position in the run; everything a checkpoint holds."""

    model: torch.nn.Module
    optimizer: torch.optim.Adam
    iteration: int
    seed: int
    config: ExperimentConfig
    arm: str = "magms"
    dropout_prob: float | None = None
    mean_volumes: dict[str, np.ndarray] | None = None


def init_state(
    config: ExperimentConfig,
    arm: str = "magms",
    seed: int | None = None,
    dropout_prob: float | None = None,
    dataset: Dataset | None = None,
) -> TrainState:
    """Fresh training state for the given arm.

    The 'mag' arm is the self-distillation ablation and forces
    lambda_kl = gamma_l2 = 0. mean_fill needs the dataset to precompute
    per-modality training-split mean volumes.
    """
    if arm not in ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}; choose one of {ARMS}")
    seed = config.seed if seed is None else seed
    if arm == "mag":
        config = config.with_overrides(lambda_kl=0.0, gamma_l2=0.0)
    mean_volumes = None
    if arm in FILL_ARMS:
        model: torch.nn.Module = build_multichannel_model(config, seed)
        if arm == "mean_fill":
            if dataset is None:
                raise ConfigurationError("mean_fill needs the dataset to compute mean volumes")
            mean_volumes = baselines.compute_mean_volumes(
                dataset.split("train"), config.modality_set
            )
    else:
        model = build_model(config, seed)
    if arm == "dropout_mean":
        if dropout_prob is None:
            dropout_prob = 0.5
        if not (0.0 < dropout_prob < 1.0):
            raise ConfigurationError(f"dropout_prob must be in (0, 1), got {dropout_prob}")
    else:
        dropout_prob = None
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return TrainState(
        model=model,
        optimizer=optimizer,
        iteration=0,
        seed=seed,
        config=config,
        arm=arm,
        dropout_prob=dropout_prob,
        mean_volumes=mean_volumes,
    )


def batch_to_tensors(batch: list[MultiModalSample], config: ExperimentConfig):
    """Stack samples into per-modality (N,1,D,H,W) tensors plus (N,D,H,W) labels."""
    if not batch:
        raise DataError("batch must be non-empty")
    modality_set = config.modality_set
    volumes = {}
    for m in modality_set:
        volumes[m.index] = torch.stack([volume_to_tensor(s.volume(m)) for s in batch])
    labels = torch.stack([labels_to_tensor(s.labels) for s in batch])
    return volumes, labels


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> list[int]:
    """Sample indices for one iteration of a seeded epoch-shuffled stream."""
    out = []
    for j in range(batch_size):
        pos_global = iteration * batch_size + j
        epoch, pos = divmod(pos_global, n)
        perm = np.random.default_rng([derive_seed(seed, "shuffle", epoch)]).permutation(n)
        out.append(int(perm[pos]))
    return out


def _mag_step_loss(state: TrainState, batch: list[MultiModalSample]):
    volumes, labels = batch_to_tensors(batch, state.config)
    outputs = state.model.forward_all_tensors(volumes)
    return mag_loss(labels, outputs, state.config)


def _fill_step_loss(state: TrainState, batch: list[MultiModalSample]):
    volumes, labels = batch_to_tensors(batch, state.config)
    stacked = torch.cat([volumes[m.index] for m in state.config.modality_set], dim=1)
    logits = state.model(stacked)
    dc = dice_ce(labels, logits, state.config.smooth_eps)
    val = dc.detach().item()
    return dc, LossBreakdown(fused_dice_ce=val, per_modality=(), total=val)


def _dropout_step_loss(state: TrainState, batch: list[MultiModalSample]):
    rng = np.random.default_rng([derive_seed(state.seed, "dropout", state.iteration)])
    volumes, labels = batch_to_tensors(batch, state.config)
    total = None
    for j in range(len(batch)):
        subset = baselines.draw_nonempty_subset(
            state.config.modality_set, rng, state.dropout_prob
        )
        sliced = {i: v[j : j + 1] for i, v in volumes.items() if i in set(subset.indices)}
        logits = state.model.forward_subset_tensors(sliced, subset)
        dc = dice_ce(labels[j : j + 1], logits, state.config.smooth_eps)
        total = dc if total is None else total + dc
    loss = total / len(batch)
    val = loss.detach().item()
    return loss, LossBreakdown(fused_dice_ce=val, per_modality=(), total=val)


def train_step(state: TrainState, batch: list[MultiModalSample]) -> LossBreakdown:
    """One forward/backward/update; aborts on a non-finite loss."""
    if not batch:
        raise DataError("train_step needs a non-empty batch")
    state.model.train()
    if state.arm in ("magms", "mag"):
        loss, breakdown = _mag_step_loss(state, batch)
    elif state.arm == "dropout_mean":
        loss, breakdown = _dropout_step_loss(state, batch)
    else:
        loss, breakdown = _fill_step_loss(state, batch)
    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}: {breakdown.to_json_dict()}",
            breakdown=breakdown,
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return breakdown


def train(
    state: TrainState,
    dataset: Dataset,
    iterations: int,
    run_dir: str | Path | None = None,
    checkpoint_every: int | None = None,
    log_fn=None,
) -> TrainState:
    """Run `iterations` steps over a seeded shuffle of the training split."""
    if iterations < 1:
        raise ConfigurationError(f"iterations must be >= 1, got {iterations}")
    pool = dataset.split("train") if "train" in dataset.splits else list(dataset.samples)
    if not pool:
        raise ConfigurationError("training split is empty")
    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        state.config.save(run_dir / "config.json")
        log_path = run_dir / "log.jsonl"
    target = state.iteration + iterations
    ctx = open(log_path, "a") if log_path else contextlib.nullcontext()
    with ctx as log_file:
        while state.iteration < target:
            idx = batch_indices(state.seed, state.iteration, len(pool), state.config.batch_size)
            batch = [pool[i] for i in idx]
            if state.config.augment:
                rng = np.random.default_rng(
                    [derive_seed(state.seed, "augment", state.iteration)]
                )
                batch = [random_flips(s, rng) for s in batch]
            breakdown = train_step(state, batch)
            line = breakdown.json_line(iteration=state.iteration, arm=state.arm)
            if log_file is not None:
                log_file.write(line + "\n")
            if log_fn is not None:
                log_fn(state.iteration, breakdown)
            if (
                run_dir is not None
                and checkpoint_every
                and state.iteration % checkpoint_every == 0
                and state.iteration < target
            ):
                save_checkpoint(state, run_dir / f"ckpt-{state.iteration}.bin")
    if run_dir is not None:
        save_checkpoint(state, run_dir / f"ckpt-{state.iteration}.bin")
    return state


def _adam_step_count(entry) -> int:
    step = entry.get("step", 0)
    if isinstance(step, torch.Tensor):
        return int(step.item())
    return int(step)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write the state as a deterministic archive (stable bytes for equal state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named_params = dict(state.model.named_parameters())
    entries: dict[str, bytes] = {}
    param_shapes = {}
    for name, p in named_params.items():
        arr = p.detach().numpy().astype("<f4")
        entries[f"params/{name}"] = arr.tobytes(order="C")
        param_shapes[name] = list(arr.shape)
    opt_steps = {}
    opt_shapes = {}
    for name, p in named_params.items():
        entry = state.optimizer.state.get(p)
        if not entry:
            continue
        opt_steps[name] = _adam_step_count(entry)
        for key in ("exp_avg", "exp_avg_sq"):
            arr = entry[key].detach().numpy().astype("<f4")
            entries[f"optim/{name}.{key}"] = arr.tobytes(order="C")
            opt_shapes[f"{name}.{key}"] = list(arr.shape)
    extras = {}
    if state.mean_volumes:
        for mod_name, vol in sorted(state.mean_volumes.items()):
            arr = np.ascontiguousarray(vol, dtype="<f4")
            entries[f"extras/mean_volume/{mod_name}.f32"] = arr.tobytes(order="C")
            extras[mod_name] = list(arr.shape)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arm": state.arm,
        "iteration": state.iteration,
        "seed": state.seed,
        "config_hash": state.config.content_hash(),
        "dropout_prob": state.dropout_prob,
        "param_shapes": param_shapes,
        "optim_steps": opt_steps,
        "optim_shapes": opt_shapes,
        "mean_volume_shapes": extras,
    }
    entries["meta.json"] = (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode()
    entries["config.json"] = state.config.to_json().encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def load_checkpoint(
    path: str | Path, expected_config: ExperimentConfig | None = None
) -> TrainState:
    """Reconstruct a TrainState; rejects foreign configs and malformed archives."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "meta.json" not in names or "config.json" not in names:
                raise CheckpointError(f"{path} is missing meta.json/config.json")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint format_version {meta.get('format_version')!r}"
                )
            config = ExperimentConfig.from_json(zf.read("config.json").decode())
            if expected_config is not None and (
                expected_config.content_hash() != config.content_hash()
            ):
                raise CheckpointError(
                    f"{path} was written with a different config "
                    f"(hash {config.content_hash()} != expected {expected_config.content_hash()})"
                )
            if meta.get("config_hash") != config.content_hash():
                raise CheckpointError(f"{path}: config.json does not match recorded hash")
            arm = meta["arm"]
            if arm in FILL_ARMS:
                model: torch.nn.Module = MultiChannelModel(config)
            else:
                model = MagModel(config)
            named_params = dict(model.named_parameters())
            if set(named_params) != set(meta["param_shapes"]):
                raise CheckpointError(f"{path}: parameter names do not match the model")
            with torch.no_grad():
                for name, p in named_params.items():
                    shape = tuple(meta["param_shapes"][name])
                    raw = zf.read(f"params/{name}")
                    arr = np.frombuffer(raw, dtype="<f4")
                    if arr.size != int(np.prod(shape)):
                        raise CheckpointError(f"{path}: bad payload size for {name}")
                    p.copy_(torch.from_numpy(arr.reshape(shape).copy()))
            optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
            for name, p in named_params.items():
                if name not in meta["optim_steps"]:
                    continue
                entry = {"step": torch.tensor(float(meta["optim_steps"][name]))}
                for key in ("exp_avg", "exp_avg_sq"):
                    raw = zf.read(f"optim/{name}.{key}")
                    shape = tuple(meta["optim_shapes"][f"{name}.{key}"])
                    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                    entry[key] = torch.from_numpy(arr)
                optimizer.state[p] = entry
            mean_volumes = None
            if meta.get("mean_volume_shapes"):
                mean_volumes = {}
                for mod_name, shape in meta["mean_volume_shapes"].items():
                    raw = zf.read(f"extras/mean_volume/{mod_name}.f32")
                    mean_volumes[mod_name] = (
                        np.frombuffer(raw, dtype="<f4").reshape(tuple(shape)).copy()
                    )
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint archive: {exc}") from exc
    except KeyError as exc:
        raise CheckpointError(f"{path} is missing an archive member: {exc}") from exc
    return TrainState(
        model=model,
        optimizer=optimizer,
        iteration=int(meta["iteration"]),
        seed=int(meta["seed"]),
        config=config,
        arm=arm,
        dropout_prob=meta.get("dropout_prob"),
        mean_volumes=mean_volumes,
    )
