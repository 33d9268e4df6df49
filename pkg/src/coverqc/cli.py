"""Command-line pipeline: prepare -> train-baseline -> explain -> train-unet
-> cascade -> evaluate, one run directory per experiment.

Every stage reads and writes below a single run directory (--out):

    <run>/run_config.json   effective configuration, persisted at prepare
    <run>/dataset/          manifest.jsonl + tensors
    <run>/checkpoints/      baseline_<task>.ckpt, unet_<task>.ckpt, logs
    <run>/masks/<task>/     explainer mask corpus
    <run>/decisions/        cascade audit JSONL + recovery summaries
    <run>/report/           report.json, tables.csv, ROC plots

Configuration precedence: built-in defaults, then the run directory's
persisted config, then command-line flags, then --config FILE (a config file
overrides flags). The effective config is re-persisted by `prepare`, so a
finished run can be replayed bit-for-bit from its own run_config.json.

Device selection uses the COVERQC_DEVICE environment variable only; this
build supports "cpu".
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import cascade as cascade_mod
from . import harness, segmenter
from .baseline import BaselineArchitectureSpec, TrainConfig
from .dataprep.augment import AugmentationSpec
from .dataprep.phantom import generate_phantom
from .dataprep.triplets import (
    TASKS,
    extract_triplets,
    load_dataset,
    make_folds,
    manifest_sha256,
    save_dataset,
)
from .dataprep.volumes import load_volume
from .errors import CoverQCError, MissingArtifact
from .explainer import (
    CorpusPair,
    ExplainerConfig,
    build_mask_corpus,
    explain,
    load_mask_corpus,
    save_mask_corpus,
)

DATASET_DIR = "dataset"
CHECKPOINT_DIR = "checkpoints"
MASK_DIR = "masks"
DECISIONS_DIR = "decisions"
REPORT_DIR = "report"
RUN_CONFIG = "run_config.json"


@dataclass(frozen=True)
class RunConfig:
    """Serializable record of every stage parameter for one run."""

    task: str = "both"  # apex | basal | both
    seed: int = 0
    folds: int = 5
    phantom_count: int = 0  # 0 means ingest from input_dir
    input_dir: str | None = None
    target_size: int = 128
    arch: dict = field(default_factory=lambda: BaselineArchitectureSpec().to_dict())
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    augmentation: dict | None = field(default_factory=lambda: asdict(AugmentationSpec()))
    explainer: dict = field(default_factory=lambda: asdict(ExplainerConfig()))
    unet_spec: dict = field(default_factory=lambda: segmenter.UNetSpec().to_dict())
    unet_train: dict = field(default_factory=lambda: asdict(segmenter.UNetTrainConfig()))
    corpus_cap: int | None = None  # limit on explained positives per task
    threshold: float = 0.5
    mode: str = "baseline"

    def __post_init__(self) -> None:
        if self.task not in TASKS + ("both",):
            raise ValueError(f"task must be apex, basal or both, got {self.task!r}")
        if self.mode not in harness.MODES:
            raise ValueError(f"mode must be one of {harness.MODES}, got {self.mode!r}")

    def tasks(self) -> tuple[str, ...]:
        return TASKS if self.task == "both" else (self.task,)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        clean = dict(d)
        for key in ("augmentation", "explainer", "train", "unet_train"):
            if isinstance(clean.get(key), dict):
                clean[key] = {k: tuple(v) if isinstance(v, list) else v for k, v in clean[key].items()}
        return RunConfig(**clean)


def _resolve_config(args, run_dir: Path) -> RunConfig:
    """defaults < persisted run config < flags < --config file."""
    base = asdict(RunConfig())
    persisted = run_dir / RUN_CONFIG
    if persisted.is_file():
        base.update(json.loads(persisted.read_text()))
    for key in ("task", "seed", "folds", "mode", "threshold"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if getattr(args, "phantom", None) is not None:
        base["phantom_count"] = args.phantom
    if getattr(args, "in_path", None) is not None and args.cmd == "prepare":
        base["input_dir"] = args.in_path
        base["phantom_count"] = 0 if args.phantom is None else base["phantom_count"]
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        base.update(overrides)
    return RunConfig.from_dict(base)


def _device() -> str:
    device = os.environ.get("COVERQC_DEVICE", "cpu")
    if device != "cpu":
        raise CoverQCError(f"COVERQC_DEVICE={device!r} is not supported by this build; use cpu")
    return device


def _pipeline_config(rc: RunConfig) -> harness.PipelineConfig:
    return harness.PipelineConfig(
        arch=BaselineArchitectureSpec.from_dict(rc.arch),
        train=TrainConfig(**rc.train),
        augmentation=AugmentationSpec(**rc.augmentation) if rc.augmentation else None,
        explainer=ExplainerConfig(**rc.explainer),
        unet_spec=segmenter.UNetSpec.from_dict(rc.unet_spec),
        unet_train=segmenter.UNetTrainConfig(**rc.unet_train),
        corpus_per_fold=rc.corpus_cap,
        threshold=rc.threshold,
        seed=rc.seed,
    )


def _manifest_path(run_dir: Path) -> Path:
    p = run_dir / DATASET_DIR / "manifest.jsonl"
    if not p.is_file():
        raise MissingArtifact(
            f"dataset manifest {p} not found; run the 'prepare' stage first",
            required_stage="prepare",
        )
    return p


def _baseline_ckpt_path(run_dir: Path, task: str, check: bool = True) -> Path:
    p = run_dir / CHECKPOINT_DIR / f"baseline_{task}.ckpt"
    if check and not p.is_file():
        raise MissingArtifact(
            f"baseline checkpoint {p} not found; run the 'train-baseline' stage first",
            required_stage="train-baseline",
        )
    return p


def _unet_ckpt_path(run_dir: Path, task: str, check: bool = True) -> Path:
    p = run_dir / CHECKPOINT_DIR / f"unet_{task}.ckpt"
    if check and not p.is_file():
        raise MissingArtifact(
            f"U-Net checkpoint {p} not found; run the 'train-unet' stage first",
            required_stage="train-unet",
        )
    return p


def _corpus_dir(run_dir: Path, task: str, check: bool = True) -> Path:
    p = run_dir / MASK_DIR / task
    if check and not p.is_dir():
        raise MissingArtifact(
            f"mask corpus {p} not found; run the 'explain' stage first",
            required_stage="explain",
        )
    return p


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    if rc.phantom_count <= 0 and not rc.input_dir:
        raise CoverQCError("prepare needs --phantom N or --in VOLUME_DIR")

    volumes = []
    if rc.phantom_count > 0:
        for i in range(rc.phantom_count):
            n = (8, 9, 10)[i % 3]
            volumes.append(generate_phantom(rc.seed * 1_000_000 + i, n, size=rc.target_size))
    else:
        paths = sorted(p for p in Path(rc.input_dir).iterdir() if p.is_file() and not p.name.endswith(".json"))
        if not paths:
            raise CoverQCError(f"no volume files under {rc.input_dir}")
        volumes = [load_volume(p) for p in paths]

    by_task = {t: [] for t in TASKS}
    for v in volumes:
        for s in extract_triplets(v, target_size=rc.target_size):
            by_task[s.task].append(s)
    datasets = [make_folds(by_task[t], rc.folds, rc.seed) for t in rc.tasks()]

    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = save_dataset(datasets, run_dir / DATASET_DIR)
    (run_dir / RUN_CONFIG).write_text(rc.to_json())
    print(f"prepared {len(volumes)} volumes -> {sum(len(d.samples) for d in datasets)} triplets")
    print(f"manifest {manifest} sha256 {manifest_sha256(manifest)}")
    return 0


def cmd_train_baseline(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    _device()
    manifest = _manifest_path(run_dir)
    pc = _pipeline_config(rc)
    for task in rc.tasks():
        ds = load_dataset(manifest, task)
        model = baseline_mod.build_model(pc.arch, pc.train.seed)
        log = run_dir / CHECKPOINT_DIR / f"baseline_{task}_log.csv"
        ckpt = baseline_mod.train_on_samples(
            model, task, ds.samples, pc.train, pc.augmentation, log_path=log
        )
        path = baseline_mod.save_checkpoint(ckpt, _baseline_ckpt_path(run_dir, task, check=False))
        m = ckpt.metrics_at_save
        print(
            f"{task}: trained on {m['train_samples']} samples, "
            f"loss {m['first_train_loss']:.4f}->{m['final_train_loss']:.4f}, "
            f"checkpoint {path} fingerprint {ckpt.arch_fingerprint[:12]}"
        )
    return 0


def cmd_explain(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    _device()
    ecfg = ExplainerConfig(**rc.explainer)

    if getattr(args, "in_path", None):  # single-stack mode
        task = rc.tasks()[0]
        ckpt_path = Path(args.checkpoint) if args.checkpoint else _baseline_ckpt_path(run_dir, task)
        ckpt = baseline_mod.load_checkpoint(ckpt_path)
        stack = np.load(args.in_path).astype(np.float32)
        result = explain(stack, ckpt, ecfg)
        pair = CorpusPair(
            sample_id=Path(args.in_path).stem,
            stack=stack,
            mask=result.mask,
            top_superpixel_id=result.top_superpixel_id,
            coefficients=result.coefficients,
            surrogate_r2=result.surrogate_r2,
        )
        out = save_mask_corpus([pair], run_dir / MASK_DIR / "single")
        print(f"explained {args.in_path}: top superpixel {result.top_superpixel_id} -> {out}")
        return 0

    manifest = _manifest_path(run_dir)
    for task in rc.tasks():
        ds = load_dataset(manifest, task)
        ckpt = baseline_mod.load_checkpoint(_baseline_ckpt_path(run_dir, task))
        source = [s for s in ds.samples if s.label == "P"]
        if rc.corpus_cap is not None and len(source) > rc.corpus_cap:
            rng = np.random.default_rng([rc.seed, 7])
            keep = rng.choice(len(source), size=rc.corpus_cap, replace=False)
            source = [source[i] for i in sorted(keep)]
        corpus = build_mask_corpus(ds, ckpt, ecfg, samples=source)
        out = save_mask_corpus(corpus, _corpus_dir(run_dir, task, check=False))
        print(f"{task}: explained {len(corpus)} true positives -> {out}")
    return 0


def cmd_train_unet(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    _device()
    spec = segmenter.UNetSpec.from_dict(rc.unet_spec)
    ucfg = segmenter.UNetTrainConfig(**rc.unet_train)
    for task in rc.tasks():
        corpus = load_mask_corpus(_corpus_dir(run_dir, task))
        log = run_dir / CHECKPOINT_DIR / f"unet_{task}_log.csv"
        ckpt = segmenter.train_unet(corpus, ucfg, spec=spec, task=f"{task}-unet", log_path=log)
        path = baseline_mod.save_checkpoint(ckpt, _unet_ckpt_path(run_dir, task, check=False))
        m = ckpt.metrics_at_save
        vd = m["val_dice"]
        print(
            f"{task}: U-Net on {m['train_pairs']}+{m['val_pairs']} pairs, "
            f"val Dice {vd if vd is None else round(vd, 4)}, checkpoint {path}"
        )
    return 0


def cmd_cascade(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    _device()
    manifest = _manifest_path(run_dir)
    for task in rc.tasks():
        ds = load_dataset(manifest, task)
        bck = baseline_mod.load_checkpoint(_baseline_ckpt_path(run_dir, task))
        uck = baseline_mod.load_checkpoint(_unet_ckpt_path(run_dir, task))
        decisions = cascade_mod.improve_predictions(ds.samples, bck, uck, rc.threshold)
        out = cascade_mod.save_decisions(decisions, run_dir / DECISIONS_DIR / f"{task}.jsonl")
        report = cascade_mod.improve_training_set_report(ds.samples, bck, uck, rc.threshold)
        rpath = run_dir / DECISIONS_DIR / f"{task}_recovery.json"
        rpath.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        n_re = sum(d.reprediction_applied for d in decisions)
        n_flip = sum(d.initial_label != d.final_label for d in decisions)
        print(
            f"{task}: {len(decisions)} decisions ({n_re} re-predicted, {n_flip} flipped to P) "
            f"-> {out}; misclassified {report['misclassified_before']}->"
            f"{report['misclassified_after']}"
        )
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.out)
    rc = _resolve_config(args, run_dir)
    _device()
    manifest = _manifest_path(run_dir)
    if rc.mode != "baseline":
        # stage-order gate: cascade evaluation requires the cascade artifacts
        for task in rc.tasks():
            _baseline_ckpt_path(run_dir, task)
            _unet_ckpt_path(run_dir, task)
    pc = _pipeline_config(rc)
    reports = []
    for task in rc.tasks():
        ds = load_dataset(manifest, task)
        rep = harness.crossvalidate(ds, pc, rc.mode)
        reports.append(rep)
        folds = " ".join(f"{f.accuracy:.4f}" for f in rep.per_fold)
        print(f"{task} [{rc.mode}]: fold accuracies {folds} mean {rep.accuracy:.4f}")
    paths = harness.emit_report(reports, run_dir / REPORT_DIR)
    print(f"report -> {paths['report_json']}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coverqc",
        description="Cardiac-coverage quality control: boundary-slice classifiers, "
        "salient-region explanations, and cascade re-prediction.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p: argparse.ArgumentParser, needs_out: bool = True) -> None:
        p.add_argument("--task", choices=TASKS + ("both",), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON config file; overrides flags")
        p.add_argument("--out", required=needs_out, help="run directory")

    p = sub.add_parser("prepare", help="generate phantom volumes or ingest a directory")
    common(p)
    p.add_argument("--phantom", type=int, default=None, help="number of phantom volumes")
    p.add_argument("--in", dest="in_path", default=None, help="directory of volume files")
    p.add_argument("--folds", type=int, default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-baseline", help="train the per-task classifier")
    common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("explain", help="build the true-positive mask corpus")
    common(p)
    p.add_argument("--in", dest="in_path", default=None, help="single stack (.npy) to explain")
    p.add_argument("--checkpoint", default=None, help="explicit baseline checkpoint path")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("train-unet", help="train the salient-region segmenter")
    common(p)
    p.set_defaults(func=cmd_train_unet)

    p = sub.add_parser("cascade", help="re-predict negatives on their salient regions")
    common(p)
    p.set_defaults(func=cmd_cascade)

    p = sub.add_parser("evaluate", help="cross-validate and emit the report bundle")
    common(p)
    p.add_argument("--mode", choices=harness.MODES, default=None)
    p.add_argument("--folds", type=int, default=None, help="must match the prepared dataset")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CoverQCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
