"""Command-line entry point: gen-data, train, sweep, verify-theory.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command writes
a run manifest into its artifact directory and derives all randomness from a
single --seed. Set MAGMS_LOG={error,info,debug} to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import DEFAULT_MODALITY_NAMES, ExperimentConfig, ModalitySubset, derive_seed
from .data import PhantomSpec, generate_phantom, read_dataset, write_dataset
from .errors import MagmsError
from .evaluation import render_report, sweep_subsets
from .theory import (
    ScalarLikelihoodPair,
    distillation_tightens_bound,
    sweep_bound,
    verify_entropy_bound,
)
from .training import ARMS, init_state, load_checkpoint, train

log = logging.getLogger("magms")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

RUN_MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunManifest:
    """Self-description written at the start of every command's artifact dir."""

    command: str
    argv: list[str]
    seed: int | None
    tool_version: str
    started_utc: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    config_hash: str | None = None


def write_run_manifest(directory: Path, manifest: RunManifest) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (RUN_MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, directory / RUN_MANIFEST_NAME)


def _manifest(command: str, argv: list[str], seed=None, inputs=(), outputs=(), config_hash=None):
    return RunManifest(
        command=command,
        argv=list(argv),
        seed=seed,
        tool_version=__version__,
        started_utc=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        config_hash=config_hash,
    )


def _setup_logging() -> None:
    level_name = os.environ.get("MAGMS_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        level_name = "info"
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def _modality_names(count: int, names_csv: str | None) -> tuple[str, ...]:
    if names_csv:
        names = tuple(n.strip() for n in names_csv.split(",") if n.strip())
        if len(names) != count:
            raise MagmsError(f"--modality-names lists {len(names)} names but --modalities is {count}")
        return names
    if count <= len(DEFAULT_MODALITY_NAMES):
        return DEFAULT_MODALITY_NAMES[:count]
    return DEFAULT_MODALITY_NAMES + tuple(
        f"M{i}" for i in range(len(DEFAULT_MODALITY_NAMES), count)
    )


def cmd_gen_data(args, argv) -> int:
    names = _modality_names(args.modalities, args.modality_names)
    spec = PhantomSpec(
        modalities=names,
        grid_size=args.size,
        num_classes=args.classes,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    write_run_manifest(out, _manifest("gen-data", argv, seed=args.seed, outputs=[out]))
    dataset = generate_phantom(spec, args.subjects)
    write_dataset(dataset, out)
    log.info(
        "wrote %d subjects (%d modalities, %d^3, %d classes) to %s",
        args.subjects, len(names), args.size, args.classes, out,
    )
    return EXIT_OK


def cmd_train(args, argv) -> int:
    dataset = read_dataset(args.data)
    run_dir = Path(args.out)
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        log.info("resuming %s arm at iteration %d from %s", state.arm, state.iteration, args.resume)
    else:
        config = ExperimentConfig(
            modalities=dataset.modality_set.names,
            num_classes=dataset.num_classes,
            lambda_kl=args.lambda_kl,
            gamma_l2=args.gamma_l2,
            kl_temperature=args.temperature,
            learning_rate=args.lr,
            iterations=args.iterations,
            batch_size=args.batch_size,
            seed=args.seed,
            augment=not args.no_augment,
        )
        state = init_state(
            config,
            arm=args.arm,
            seed=args.seed,
            dropout_prob=args.dropout,
            dataset=dataset,
        )
    write_run_manifest(
        run_dir,
        _manifest(
            "train", argv, seed=state.seed, inputs=[args.data], outputs=[run_dir],
            config_hash=state.config.content_hash(),
        ),
    )
    train(
        state,
        dataset,
        iterations=args.iterations,
        run_dir=run_dir,
        checkpoint_every=args.checkpoint_every,
    )
    log.info("finished %s arm at iteration %d; artifacts in %s", state.arm, state.iteration, run_dir)
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    dataset = read_dataset(args.data)
    out_dir = Path(args.out)
    write_run_manifest(
        out_dir,
        _manifest("sweep", argv, inputs=[args.checkpoint, args.data], outputs=[out_dir]),
    )
    report = sweep_subsets(args.checkpoint, dataset, split=args.split)
    formats = args.format + (",plots" if args.plots else "")
    render_report(report, formats, out_dir=out_dir)
    log.info("wrote %d-row sweep report to %s", len(report.rows), out_dir)
    full = report.full_subset_row()
    print(f"subsets: {len(report.rows)}")
    print(f"all-modality mean dice: {full.mean_dice:.4f} +/- {full.std_dice:.4f}")
    return EXIT_OK


def _parse_pairs(text: str) -> list[ScalarLikelihoodPair]:
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise ValueError(f"pair {chunk!r} must look like P_M:P_S, e.g. 0.9:0.6")
        p_m, p_s = float(parts[0]), float(parts[1])
        try:
            pairs.append(ScalarLikelihoodPair(p_M=p_m, p_S=p_s))
        except MagmsError as exc:
            raise ValueError(str(exc)) from exc
    if not pairs:
        raise ValueError("no pairs given")
    return pairs


def cmd_verify_theory(args, argv) -> int:
    failures = 0
    if args.pairs:
        pairs = _parse_pairs(args.pairs)
    else:
        rng = np.random.default_rng([derive_seed(args.seed, "cli-pairs")])
        pairs = []
        while len(pairs) < 8:
            a, b = rng.random(), rng.random()
            if 0.0 < min(a, b) < max(a, b) < 1.0:
                pairs.append(ScalarLikelihoodPair(p_M=max(a, b), p_S=min(a, b)))
    print(f"{'p_M':>8} {'p_S':>8} {'H_S':>10} {'H_M':>10} {'D_KL':>10} {'bound':>10}  holds")
    for pair in pairs:
        check = verify_entropy_bound(pair)
        print(
            f"{check.p_M:8.4f} {check.p_S:8.4f} {check.h_S:10.6f} {check.h_M:10.6f} "
            f"{check.d_kl:10.6f} {check.bound:10.6f}  {'yes' if check.holds else 'NO'}"
        )
        if not check.holds:
            failures += 1
    fraction = sweep_bound(args.samples, seed=args.seed)
    print(f"fraction holding: {fraction:.6f} ({args.samples} sampled pairs)")
    if fraction < 1.0:
        failures += 1
    if args.compare_with and args.compare_without:
        if not args.data:
            raise MagmsError("--compare-with/--compare-without need --data for evaluation")
        dataset = read_dataset(args.data)
        state_w = load_checkpoint(args.compare_with)
        state_wo = load_checkpoint(args.compare_without)
        modality_set = state_w.config.modality_set
        if args.subset:
            subset = ModalitySubset(
                tuple(modality_set.by_name(n.strip()) for n in args.subset.split("+"))
            )
            subsets = [subset]
        else:
            subsets = [ModalitySubset((m,)) for m in modality_set]
        samples = dataset.split(args.split)
        print(f"{'subset':>12} {'H with':>10} {'H w/o':>10} {'KL with':>10} {'KL w/o':>10}  KL reduced")
        for subset in subsets:
            cmp = distillation_tightens_bound(state_w.model, state_wo.model, samples, subset)
            print(
                f"{cmp.subset_label:>12} {cmp.entropy_with:10.6f} {cmp.entropy_without:10.6f} "
                f"{cmp.kl_with:10.6f} {cmp.kl_without:10.6f}  {'yes' if cmp.kl_reduced else 'NO'}"
            )
    elif args.compare_with or args.compare_without:
        raise MagmsError("checkpoint comparison needs both --compare-with and --compare-without")
    return EXIT_FAILURE if failures else EXIT_OK


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magms",
        description=(
            "Modality-agnostic 3D segmentation: phantom generation, "
            "self-distillation training, subset sweeps, and bound verification."
        ),
    )
    parser.add_argument("--version", action="version", version=f"magms {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-modal phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--modalities", type=_positive_int, default=4, help="number of modalities")
    p.add_argument("--modality-names", default=None, help="comma-separated names (optional)")
    p.add_argument("--size", type=_positive_int, default=32, help="cubic grid edge length")
    p.add_argument("--subjects", type=_positive_int, default=18, help="number of subjects")
    p.add_argument("--classes", type=_positive_int, default=4, help="classes incl. background")
    p.add_argument("--noise", type=float, default=0.08, help="Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one arm on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--arm", choices=ARMS, default="magms")
    p.add_argument("--iterations", type=_positive_int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-kl", type=float, default=1.0, dest="lambda_kl")
    p.add_argument("--gamma-l2", type=float, default=1.0, dest="gamma_l2")
    p.add_argument("--temperature", type=float, default=1.0, help="KL softmax temperature")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=2)
    p.add_argument("--dropout", type=float, default=0.5, help="modality dropout prob (dropout_mean)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=_positive_int, default=None)
    p.add_argument("--no-augment", action="store_true", help="disable flip augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="evaluate one checkpoint over all modality subsets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--format", default="csv,md", help="comma list of csv,md")
    p.add_argument("--plots", action="store_true", help="also write bar-plot images")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory", help="check the entropy/KL bound numerically")
    p.add_argument("--samples", type=_positive_int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", default=None, help="explicit P_M:P_S pairs, comma separated")
    p.add_argument("--compare-with", default=None, help="checkpoint trained with distillation")
    p.add_argument("--compare-without", default=None, help="checkpoint trained without")
    p.add_argument("--data", default=None, help="dataset directory for the comparison")
    p.add_argument("--subset", default=None, help="modality subset like T1 or T1+T2")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_verify_theory)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (MagmsError, ValueError) as exc:
        # malformed values that slipped past argparse count as usage errors
        if isinstance(exc, ValueError):
            print(f"usage error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
